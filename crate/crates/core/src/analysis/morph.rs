use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Connectivity {
    Four,
    Eight,
}

/// Single connected foreground region.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BreastMask {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
    area: usize,
}

impl BreastMask {
    pub fn from_indices(rows: usize, cols: usize, idx: &[usize]) -> Self {
        let mut bits = vec![false; rows * cols];
        for &i in idx {
            bits[i] = true;
        }
        let area = bits.iter().filter(|&&b| b).count();
        BreastMask { rows, cols, bits, area }
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        BreastMask { rows, cols, bits: vec![true; rows * cols], area: rows * cols }
    }

    pub fn area(&self) -> usize {
        self.area
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        r < self.rows && c < self.cols && self.bits[r * self.cols + c]
    }

    pub fn contains_index(&self, i: usize) -> bool {
        self.bits[i]
    }

    /// Raster-order pixel indices inside the mask.
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }

    /// `(min_row, min_col, max_row, max_col)`, inclusive.
    pub fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let mut it = self.indices();
        let first = it.next()?;
        let mut b = (first / self.cols, first % self.cols, first / self.cols, first % self.cols);
        for i in std::iter::once(first).chain(it) {
            let (r, c) = (i / self.cols, i % self.cols);
            b = (b.0.min(r), b.1.min(c), b.2.max(r), b.3.max(c));
        }
        Some(b)
    }
}

/// Connected components of `fg` in raster order of their first pixel.
pub fn components(rows: usize, cols: usize, fg: &[bool], conn: Connectivity) -> Vec<Vec<usize>> {
    let mut seen = vec![false; fg.len()];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..fg.len() {
        if !fg[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut comp = Vec::new();
        while let Some(i) = queue.pop_front() {
            comp.push(i);
            let (r, c) = ((i / cols) as isize, (i % cols) as isize);
            for (dr, dc) in neighbours(conn) {
                let (nr, nc) = (r + dr, c + dc);
                if nr < 0 || nc < 0 || nr >= rows as isize || nc >= cols as isize {
                    continue;
                }
                let j = nr as usize * cols + nc as usize;
                if fg[j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

fn neighbours(conn: Connectivity) -> &'static [(isize, isize)] {
    const FOUR: [(isize, isize); 4] = [(-1, 0), (0, -1), (0, 1), (1, 0)];
    const EIGHT: [(isize, isize); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];
    match conn {
        Connectivity::Four => &FOUR,
        Connectivity::Eight => &EIGHT,
    }
}

/// Largest 4-connected component; ties to the one whose first pixel comes
/// first in raster order.
pub(super) fn largest_component(rows: usize, cols: usize, fg: &[bool]) -> Option<BreastMask> {
    let comps = components(rows, cols, fg, Connectivity::Four);
    let mut best: Option<&Vec<usize>> = None;
    for c in &comps {
        if best.map_or(true, |b| c.len() > b.len()) {
            best = Some(c);
        }
    }
    best.map(|c| BreastMask::from_indices(rows, cols, c))
}

fn filter_1d(src: &[u16], dst: &mut [u16], r: usize, take_min: bool) {
    let n = src.len();
    for (i, out) in dst.iter_mut().enumerate() {
        let lo = i.saturating_sub(r);
        let hi = (i + r).min(n - 1);
        let w = &src[lo..=hi];
        *out = if take_min { *w.iter().min().unwrap() } else { *w.iter().max().unwrap() };
    }
}

/// Separable square filter of side `2r+1`. Clamping the window at the border
/// is the same as edge replication for min and max.
fn square_filter(rows: usize, cols: usize, px: &[u16], r: usize, take_min: bool) -> Vec<u16> {
    let mut tmp = vec![0u16; px.len()];
    for row in 0..rows {
        let s = row * cols;
        filter_1d(&px[s..s + cols], &mut tmp[s..s + cols], r, take_min);
    }
    let mut out = vec![0u16; px.len()];
    let mut col_in = vec![0u16; rows];
    let mut col_out = vec![0u16; rows];
    for c in 0..cols {
        for row in 0..rows {
            col_in[row] = tmp[row * cols + c];
        }
        filter_1d(&col_in, &mut col_out, r, take_min);
        for row in 0..rows {
            out[row * cols + c] = col_out[row];
        }
    }
    out
}

/// Grey-level opening (erosion then dilation) with a flat square of side
/// `2r+1`.
pub fn opening(rows: usize, cols: usize, px: &[u16], r: usize) -> Vec<u16> {
    let eroded = square_filter(rows, cols, px, r, true);
    square_filter(rows, cols, &eroded, r, false)
}
