/// Anchor cells are those with `i + j` even.
pub fn is_anchor(i: usize, j: usize) -> bool {
    (i + j).is_multiple_of(2)
}

/// Row-major anchor mask for an `h x w` grid.
pub fn anchor_mask(h: usize, w: usize) -> Vec<bool> {
    (0..h * w).map(|p| is_anchor(p / w, p % w)).collect()
}

pub fn non_anchor_mask(h: usize, w: usize) -> Vec<bool> {
    anchor_mask(h, w).into_iter().map(|a| !a).collect()
}

/// Flat indices of anchor cells in raster order.
pub fn anchor_positions(h: usize, w: usize) -> Vec<usize> {
    (0..h * w).filter(|&p| is_anchor(p / w, p % w)).collect()
}

pub fn non_anchor_positions(h: usize, w: usize) -> Vec<usize> {
    (0..h * w).filter(|&p| !is_anchor(p / w, p % w)).collect()
}
