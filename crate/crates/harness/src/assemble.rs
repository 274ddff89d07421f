use matchcut_core::{Error, PixelVideo, Result, Video};

/// Frames `[0, cut)` of `x_a` followed by frames `[cut, end)` of `x_b`.
pub fn assemble_matchcut(x_a: &PixelVideo, x_b: &PixelVideo, cut_frame: usize) -> Result<PixelVideo> {
    x_a.ensure_same_shape(x_b)?;
    let n = x_a.shape().frames;
    if cut_frame == 0 || cut_frame >= n {
        return Err(Error::invalid("cut_frame", format!("must be in 1..{n}, got {cut_frame}")));
    }
    let head = x_a.frames_range(0, cut_frame)?;
    let tail = x_b.frames_range(cut_frame, n)?;
    Video::concat_frames(&[&head, &tail])
}

/// The midpoint cut used when none is given.
pub fn default_cut(frames: usize) -> usize {
    (frames / 2).max(1)
}
