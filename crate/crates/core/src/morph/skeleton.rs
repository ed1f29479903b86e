//! Topology-preserving thinning.
//!
//! Zhang-Suen style: each pass has two sub-iterations (south-east borders,
//! then north-west borders). The candidates of a sub-iteration are collected
//! on a snapshot and then removed one at a time in raster order, each only if
//! it is still a simple point in the current image. That final check keeps
//! the result connected even on 2-pixel-thick stretches where plain
//! Zhang-Suen deletes both layers.
//!
//! [`skeletonize`] additionally pins the pixels where each component's
//! distance transform peaks, so the axis always runs through the centre of
//! the largest inscribed disk.

use super::{distance_transform, DistanceField};
use crate::imagecore::BinaryMask;
use crate::postproc::{connected_components, LabeledComponents};

/// Medial-axis pixels of one connected component.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Skeleton {
    pub points: Vec<(usize, usize)>,
}

impl Skeleton {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Neighbours P2..P9 clockwise from north, outside the raster read as 0.
fn neighbours(img: &[u8], w: usize, h: usize, x: usize, y: usize) -> [u8; 8] {
    let at = |dx: isize, dy: isize| -> u8 {
        let (nx, ny) = (x as isize + dx, y as isize + dy);
        if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
            0
        } else {
            img[ny as usize * w + nx as usize]
        }
    };
    [
        at(0, -1),
        at(1, -1),
        at(1, 0),
        at(1, 1),
        at(0, 1),
        at(-1, 1),
        at(-1, 0),
        at(-1, -1),
    ]
}

/// 0 -> 1 transitions around the ring P2, P3, ..., P9, P2.
fn transitions(n: &[u8; 8]) -> usize {
    (0..8).filter(|&i| n[i] == 0 && n[(i + 1) % 8] == 1).count()
}

/// Yokoi connectivity number for 8-connected foreground. A border pixel is
/// simple exactly when this equals 1.
fn yokoi8(n: &[u8; 8]) -> i32 {
    // Complemented neighbours, starting at the 4-neighbour north.
    let c = |i: usize| 1 - n[i % 8] as i32;
    [0, 2, 4, 6]
        .iter()
        .map(|&k| c(k) - c(k) * c(k + 1) * c(k + 2))
        .sum()
}

/// Thinned copy of `mask` (all components at once).
pub fn thin(mask: &BinaryMask) -> BinaryMask {
    thin_pinned(mask, &vec![false; mask.width() * mask.height()])
}

/// Thinning that never deletes pixels flagged in `pinned`.
fn thin_pinned(mask: &BinaryMask, pinned: &[bool]) -> BinaryMask {
    let (w, h) = (mask.width(), mask.height());
    let mut img = mask.data().to_vec();
    let mut candidates = Vec::new();
    loop {
        let mut changed = false;
        for step in 0..2 {
            candidates.clear();
            for y in 0..h {
                for x in 0..w {
                    if img[y * w + x] == 0 || pinned[y * w + x] {
                        continue;
                    }
                    let n = neighbours(&img, w, h, x, y);
                    let b: u8 = n.iter().sum();
                    if !(2..=6).contains(&b) || transitions(&n) != 1 {
                        continue;
                    }
                    let (p2, p4, p6, p8) = (n[0], n[2], n[4], n[6]);
                    let ok = if step == 0 {
                        p2 * p4 * p6 == 0 && p4 * p6 * p8 == 0
                    } else {
                        p2 * p4 * p8 == 0 && p2 * p6 * p8 == 0
                    };
                    if ok {
                        candidates.push((x, y));
                    }
                }
            }
            for &(x, y) in &candidates {
                let n = neighbours(&img, w, h, x, y);
                if yokoi8(&n) == 1 {
                    img[y * w + x] = 0;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    BinaryMask::new(w, h, img).expect("same dimensions")
}

/// Labels, per-component distance fields and skeletons of `mask`.
pub(crate) fn analyze(mask: &BinaryMask) -> (LabeledComponents, Vec<DistanceField>, Vec<Skeleton>) {
    let cc = connected_components(mask);
    let fields: Vec<DistanceField> = (1..=cc.count() as u32)
        .map(|l| distance_transform(&cc.component_mask(l)))
        .collect();
    let mut pinned = vec![false; mask.width() * mask.height()];
    for (i, f) in fields.iter().enumerate() {
        let peak = f.max();
        for (j, &d) in f.data.iter().enumerate() {
            if cc.labels[j] == i as u32 + 1 && d == peak {
                pinned[j] = true;
            }
        }
    }
    let mut thinned = thin_pinned(mask, &pinned);
    prune_spurs(&mut thinned, &cc, &fields, &pinned);
    let mut skels = vec![Skeleton { points: Vec::new() }; cc.count()];
    for (x, y) in thinned.foreground() {
        let l = cc.labels[y * mask.width() + x];
        skels[l as usize - 1].points.push((x, y));
    }
    (cc, fields, skels)
}

/// Slack, in pixels, of the disc-containment test in [`prune_spurs`].
const SPUR_TOLERANCE: f64 = 2.0;

fn skeleton_neighbours(img: &[u8], w: usize, h: usize, x: usize, y: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(8);
    for dy in -1isize..=1 {
        for dx in -1isize..=1 {
            if dx == 0 && dy == 0 {
                continue;
            }
            let (u, v) = (x as isize + dx, y as isize + dy);
            if u >= 0
                && v >= 0
                && (u as usize) < w
                && (v as usize) < h
                && img[v as usize * w + u as usize] != 0
            {
                out.push((u as usize, v as usize));
            }
        }
    }
    out
}

/// Removes terminal branches that add no shape: a branch from end point `e`
/// to its anchor `j` (the first junction or pinned peak along it) is dropped
/// when the maximal disc at `e` lies inside the one at `j`, i.e. `|e - j| + D(e) <= D(j) + SPUR_TOLERANCE`. Such
/// branches come from boundary roughness and would otherwise feed tiny
/// radii into the narrow-caliber estimate. Pinned pixels are never removed.
fn prune_spurs(
    skel: &mut BinaryMask,
    cc: &LabeledComponents,
    fields: &[DistanceField],
    pinned: &[bool],
) {
    let (w, h) = (skel.width(), skel.height());
    let mut img = skel.data().to_vec();
    loop {
        let mut removed = false;
        for start in 0..w * h {
            if img[start] == 0 {
                continue;
            }
            let (sx, sy) = (start % w, start / w);
            if pinned[start] || skeleton_neighbours(&img, w, h, sx, sy).len() != 1 {
                continue;
            }
            let mut path = vec![(sx, sy)];
            let mut junction = None;
            let mut cur = (sx, sy);
            loop {
                let nb = skeleton_neighbours(&img, w, h, cur.0, cur.1);
                if cur != (sx, sy) && (nb.len() >= 3 || pinned[cur.1 * w + cur.0]) {
                    junction = Some(cur);
                    path.pop();
                    break;
                }
                let next: Vec<_> = nb.into_iter().filter(|q| !path.contains(q)).collect();
                if next.len() != 1 {
                    break;
                }
                cur = next[0];
                path.push(cur);
            }
            let Some((jx, jy)) = junction else { continue };
            let field = &fields[cc.labels[start] as usize - 1];
            let reach = ((sx as f64 - jx as f64).powi(2) + (sy as f64 - jy as f64).powi(2)).sqrt();
            if reach + field.get(sx, sy) <= field.get(jx, jy) + SPUR_TOLERANCE {
                for &(x, y) in &path {
                    img[y * w + x] = 0;
                }
                removed = true;
            }
        }
        if !removed {
            break;
        }
    }
    *skel = BinaryMask::new(w, h, img).expect("same dimensions");
}

/// One skeleton per 8-connected component, in component label order.
pub fn skeletonize(mask: &BinaryMask) -> Vec<Skeleton> {
    analyze(mask).2
}
