//! Binary morphology on [`Mask`] grids: 4-neighbour boundaries, erosion,
//! disk closing and connected components.

use std::collections::VecDeque;

use crate::types::Mask;

const NEIGHBOURS4: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];

fn offset(mask: &Mask, col: usize, row: usize, d: (isize, isize)) -> Option<(usize, usize)> {
    let c = col as isize + d.0;
    let r = row as isize + d.1;
    if c < 0 || r < 0 || c >= mask.width as isize || r >= mask.height as isize {
        None
    } else {
        Some((c as usize, r as usize))
    }
}

/// Mask pixels with at least one 4-neighbour outside the mask. Pixels on the
/// grid edge count as touching the outside.
pub fn boundary_mask(mask: &Mask) -> Mask {
    Mask::from_fn(mask.width, mask.height, |col, row| {
        mask.get(col, row)
            && NEIGHBOURS4.iter().any(|&d| match offset(mask, col, row, d) {
                Some((c, r)) => !mask.get(c, r),
                None => true,
            })
    })
}

/// One step of 4-neighbour erosion; off-grid counts as background.
pub fn erode4(mask: &Mask) -> Mask {
    mask.minus(&boundary_mask(mask))
}

/// Band of `thickness` pixels just inside the mask boundary.
pub fn inner_band(mask: &Mask, thickness: usize) -> Mask {
    let mut core = mask.clone();
    for _ in 0..thickness {
        core = erode4(&core);
    }
    mask.minus(&core)
}

fn disk_offsets(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                out.push((dx, dy));
            }
        }
    }
    out
}

pub fn dilate_disk(mask: &Mask, radius: usize) -> Mask {
    let disk = disk_offsets(radius);
    Mask::from_fn(mask.width, mask.height, |col, row| {
        disk.iter()
            .any(|&d| offset(mask, col, row, d).is_some_and(|(c, r)| mask.get(c, r)))
    })
}

/// Disk erosion; off-grid neighbours are ignored so that closing does not
/// eat into shapes touching the border.
pub fn erode_disk(mask: &Mask, radius: usize) -> Mask {
    let disk = disk_offsets(radius);
    Mask::from_fn(mask.width, mask.height, |col, row| {
        disk.iter()
            .all(|&d| offset(mask, col, row, d).is_none_or(|(c, r)| mask.get(c, r)))
    })
}

pub fn close_disk(mask: &Mask, radius: usize) -> Mask {
    if radius == 0 {
        return mask.clone();
    }
    erode_disk(&dilate_disk(mask, radius), radius)
}

/// 4-connected components as row-major pixel-index lists, ordered by their
/// first (lowest row-major) pixel.
pub fn components4(mask: &Mask) -> Vec<Vec<usize>> {
    let mut seen = vec![false; mask.data.len()];
    let mut out = Vec::new();
    for start in 0..mask.data.len() {
        if !mask.data[start] || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(i) = queue.pop_front() {
            comp.push(i);
            let (col, row) = (i % mask.width, i / mask.width);
            for d in NEIGHBOURS4 {
                if let Some((c, r)) = offset(mask, col, row, d) {
                    let j = r * mask.width + c;
                    if mask.data[j] && !seen[j] {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

/// Largest 4-connected component; ties go to the component whose first
/// pixel comes first in row-major order. `None` for an empty mask.
pub fn largest_component(mask: &Mask) -> Option<Mask> {
    let comps = components4(mask);
    let mut best: Option<&Vec<usize>> = None;
    for c in &comps {
        if best.is_none_or(|b| c.len() > b.len()) {
            best = Some(c);
        }
    }
    best.map(|c| {
        let mut m = Mask::new(mask.width, mask.height);
        for &i in c {
            m.data[i] = true;
        }
        m
    })
}

pub fn is_connected4(mask: &Mask) -> bool {
    components4(mask).len() == 1
}

/// Fill background regions not reachable from the grid edge.
pub fn fill_holes(mask: &Mask) -> Mask {
    let outside = {
        let bg = Mask { width: mask.width, height: mask.height, data: mask.data.iter().map(|b| !b).collect() };
        let mut reach = Mask::new(mask.width, mask.height);
        for comp in components4(&bg) {
            let touches_edge = comp.iter().any(|&i| {
                let (c, r) = (i % mask.width, i / mask.width);
                c == 0 || r == 0 || c + 1 == mask.width || r + 1 == mask.height
            });
            if touches_edge {
                for i in comp {
                    reach.data[i] = true;
                }
            }
        }
        reach
    };
    Mask { width: mask.width, height: mask.height, data: outside.data.iter().map(|b| !b).collect() }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(w: usize, h: usize, c0: usize, r0: usize, side: usize) -> Mask {
        Mask::from_fn(w, h, |c, r| c >= c0 && c < c0 + side && r >= r0 && r < r0 + side)
    }

    #[test]
    fn boundary_of_3x3_square_is_its_ring() {
        let m = square(5, 5, 1, 1, 3);
        let b = boundary_mask(&m);
        assert_eq!(b.count(), 8);
        assert!(!b.get(2, 2));
    }

    #[test]
    fn band_thickness_two() {
        let m = square(10, 10, 1, 1, 8);
        assert_eq!(inner_band(&m, 2).count(), 64 - 16);
    }

    #[test]
    fn largest_component_and_tie_break() {
        let mut m = square(12, 12, 0, 0, 2);
        for (c, r) in square(12, 12, 6, 6, 3).pixels() {
            m.set(c, r, true);
        }
        let big = largest_component(&m).unwrap();
        assert_eq!(big.count(), 9);
        assert!(big.get(6, 6));

        let mut tie = square(12, 12, 8, 0, 2);
        for (c, r) in square(12, 12, 0, 6, 2).pixels() {
            tie.set(c, r, true);
        }
        let first = largest_component(&tie).unwrap();
        assert!(first.get(8, 0));
    }

    #[test]
    fn closing_fills_pinholes() {
        let mut m = square(20, 20, 3, 3, 12);
        m.set(8, 8, false);
        let closed = close_disk(&m, 2);
        assert!(closed.get(8, 8));
        assert_eq!(closed, square(20, 20, 3, 3, 12));
    }

    #[test]
    fn holes_are_filled() {
        let mut m = square(10, 10, 2, 2, 6);
        m.set(4, 4, false);
        m.set(5, 4, false);
        assert_eq!(fill_holes(&m), square(10, 10, 2, 2, 6));
    }
}
