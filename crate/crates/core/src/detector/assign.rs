//! Center-cell target assignment.

use std::cmp::Ordering;

use super::bbox::BBox;
use crate::error::{Error, Result};

/// Per-cell ground truth ownership on the feature grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub grid_h: usize,
    pub grid_w: usize,
    pub image_h: usize,
    pub image_w: usize,
    /// Row-major, `Some((gt index, gt box))` for positive cells.
    pub cells: Vec<Option<(usize, BBox)>>,
}

impl Assignment {
    pub fn get(&self, gy: usize, gx: usize) -> Option<&(usize, BBox)> {
        self.cells[gy * self.grid_w + gx].as_ref()
    }

    pub fn positives(&self) -> impl Iterator<Item = (usize, usize, &BBox)> + '_ {
        self.cells.iter().enumerate().filter_map(move |(i, c)| {
            c.as_ref().map(|(_, b)| (i / self.grid_w, i % self.grid_w, b))
        })
    }

    pub fn num_positives(&self) -> usize {
        self.cells.iter().filter(|c| c.is_some()).count()
    }
}

/// Larger area first; equal areas fall back to geometry then class so the
/// winner never depends on input order.
fn priority(a: &BBox, b: &BBox) -> Ordering {
    b.area()
        .total_cmp(&a.area())
        .then(a.x.total_cmp(&b.x))
        .then(a.y.total_cmp(&b.y))
        .then(a.w.total_cmp(&b.w))
        .then(a.h.total_cmp(&b.h))
        .then(a.class_id.cmp(&b.class_id))
}

/// Assigns each ground-truth box to the grid cell containing its center.
/// When several boxes share a cell the largest one wins.
pub fn assign_targets(gt: &[BBox], grid: (usize, usize), image: (usize, usize)) -> Result<Assignment> {
    let (grid_h, grid_w) = grid;
    let (image_h, image_w) = image;
    if grid_h == 0 || grid_w == 0 || image_h == 0 || image_w == 0 {
        return Err(Error::InvalidArgument("empty grid or image".into()));
    }
    let (sy, sx) = (image_h as f64 / grid_h as f64, image_w as f64 / grid_w as f64);
    let mut cells: Vec<Option<(usize, BBox)>> = vec![None; grid_h * grid_w];
    for (i, b) in gt.iter().enumerate() {
        if !b.is_valid() {
            return Err(Error::InvalidArgument(format!("ground truth {i} is not a valid box: {b:?}")));
        }
        let (cx, cy) = b.center();
        if !(0.0..image_w as f64).contains(&cx) || !(0.0..image_h as f64).contains(&cy) {
            return Err(Error::InvalidArgument(format!(
                "ground truth {i} has center ({cx}, {cy}) outside the {image_w}x{image_h} image"
            )));
        }
        let gx = ((cx / sx) as usize).min(grid_w - 1);
        let gy = ((cy / sy) as usize).min(grid_h - 1);
        let slot = &mut cells[gy * grid_w + gx];
        let replace = match slot {
            None => true,
            Some((_, cur)) => priority(b, cur) == Ordering::Less,
        };
        if replace {
            *slot = Some((i, *b));
        }
    }
    Ok(Assignment {
        grid_h,
        grid_w,
        image_h,
        image_w,
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_box_marks_one_cell() {
        // center (22, 14) → cell (row 3, col 5) at stride 4
        let gt = [BBox::new(20.0, 12.0, 4.0, 4.0, 1)];
        let a = assign_targets(&gt, (16, 16), (64, 64)).unwrap();
        assert_eq!(a.num_positives(), 1);
        assert!(a.get(3, 5).is_some());
    }

    #[test]
    fn larger_box_wins_collision() {
        let small = BBox::new(20.0, 12.0, 2.0, 5.0, 0); // area 10
        let big = BBox::new(16.0, 8.0, 10.0, 10.0, 1); // area 100, same center cell
        for order in [[small, big], [big, small]] {
            let a = assign_targets(&order, (16, 16), (64, 64)).unwrap();
            assert_eq!(a.get(3, 5).unwrap().1, big);
        }
    }

    #[test]
    fn center_outside_rejected() {
        let gt = [BBox::new(60.0, 10.0, 10.0, 4.0, 0)];
        let err = assign_targets(&gt, (16, 16), (64, 64)).unwrap_err();
        assert!(err.to_string().contains("outside"));
    }

    /// Brute-force reference: for each cell, scan all boxes for those whose
    /// center falls inside the cell rectangle and keep the best by priority.
    fn oracle(gt: &[BBox], grid: usize, img: f64) -> Vec<Option<BBox>> {
        let s = img / grid as f64;
        let mut out = vec![None; grid * grid];
        for gy in 0..grid {
            for gx in 0..grid {
                let inside: Vec<&BBox> = gt
                    .iter()
                    .filter(|b| {
                        let (cx, cy) = b.center();
                        cx >= gx as f64 * s && cx < (gx + 1) as f64 * s && cy >= gy as f64 * s && cy < (gy + 1) as f64 * s
                    })
                    .collect();
                out[gy * grid + gx] = inside.into_iter().min_by(|a, b| priority(a, b)).copied();
            }
        }
        out
    }

    #[test]
    fn random_cases_match_oracle_and_are_order_free() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..50 {
            let mut gt: Vec<BBox> = (0..10)
                .map(|_| {
                    let w = rng.random_range(2..12) as f64;
                    let h = rng.random_range(2..12) as f64;
                    let x = rng.random_range(0.0..(32.0 - w));
                    let y = rng.random_range(0.0..(32.0 - h));
                    BBox::new(x.floor(), y.floor(), w, h, rng.random_range(0..3))
                })
                .collect();
            let a = assign_targets(&gt, (8, 8), (32, 32)).unwrap();
            let got: Vec<Option<BBox>> = a.cells.iter().map(|c| c.map(|(_, b)| b)).collect();
            assert_eq!(got, oracle(&gt, 8, 32.0));
            gt.shuffle(&mut rng);
            let b = assign_targets(&gt, (8, 8), (32, 32)).unwrap();
            let shuffled: Vec<Option<BBox>> = b.cells.iter().map(|c| c.map(|(_, b)| b)).collect();
            assert_eq!(got, shuffled);
        }
    }
}
