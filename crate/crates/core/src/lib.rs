pub mod backbone;
pub mod error;
pub mod forksampler;
pub mod intervene;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod schedule;
pub mod toydata;
pub mod video;

pub use error::{Error, Result};
pub use schedule::{NoiseSchedule, ScheduleSpec, Timestep};
pub use video::{LatentVideo, PixelVideo, Video, VideoShape};
