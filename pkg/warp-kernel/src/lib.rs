//! Depth-based forward warping: splat every source pixel into the target
//! view with a z-buffer, producing backward shift map, occlusion mask,
//! warped colors, and target depth.
//!
//! The per-pixel arithmetic (float32, fixed operation order, half-up
//! rounding) and the (depth, source index) tie-break are a strict contract:
//! outputs must be bit-identical to the reference implementation for every
//! input, at any thread count. No `mul_add` anywhere - fused operations
//! would change results.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::slice;

use rayon::prelude::*;

pub const HOLE_DEPTH: f32 = f32::MAX;

const OK: i32 = 0;
const ERR_DIMENSIONS: i32 = 1;
const ERR_NULL: i32 = 2;
const ERR_PANIC: i32 = 3;

const ROWS_PER_CHUNK: usize = 64;

/// Per-target-pixel z-buffer cell: winning depth and source raster index.
#[derive(Clone, Copy)]
struct Cell {
    z: f32,
    idx: u32,
}

const EMPTY: Cell = Cell { z: f32::INFINITY, idx: u32::MAX };

impl Cell {
    #[inline]
    fn better_than(self, other: Cell) -> bool {
        self.z < other.z || (self.z == other.z && self.idx < other.idx)
    }
}

pub struct Intrinsics {
    pub fx: f32,
    pub fy: f32,
    pub cx: f32,
    pub cy: f32,
}

/// Splat one row range into a local z-buffer.
fn splat_rows(
    depth: &[f32],
    pose: &[f32; 12],
    k: &Intrinsics,
    h: usize,
    w: usize,
    rows: std::ops::Range<usize>,
    zbuf: &mut [Cell],
) {
    let (r00, r01, r02, t0) = (pose[0], pose[1], pose[2], pose[3]);
    let (r10, r11, r12, t1) = (pose[4], pose[5], pose[6], pose[7]);
    let (r20, r21, r22, t2) = (pose[8], pose[9], pose[10], pose[11]);
    let w_max = (w - 1) as f32;
    let h_max = (h - 1) as f32;
    for y in rows {
        let yf = y as f32;
        for x in 0..w {
            let d = depth[y * w + x];
            let xc = (x as f32 - k.cx) * d / k.fx;
            let yc = (yf - k.cy) * d / k.fy;
            let xp = r00 * xc + r01 * yc + r02 * d + t0;
            let yp = r10 * xc + r11 * yc + r12 * d + t1;
            let zp = r20 * xc + r21 * yc + r22 * d + t2;
            if !(zp > 0.0) {
                continue;
            }
            let u = k.fx * xp / zp + k.cx;
            let v = k.fy * yp / zp + k.cy;
            let qx = (u + 0.5).floor();
            let qy = (v + 0.5).floor();
            if !(qx >= 0.0 && qx <= w_max && qy >= 0.0 && qy <= h_max) {
                continue;
            }
            let q = qy as usize * w + qx as usize;
            let cand = Cell { z: zp, idx: (y * w + x) as u32 };
            if cand.better_than(zbuf[q]) {
                zbuf[q] = cand;
            }
        }
    }
}

/// Full warp on validated slices. Parallelism partitions source rows; the
/// (z, idx) ordering is total, so merging local buffers in any order or
/// thread count yields the same winners.
pub fn forward_warp(
    rgb: &[f32],
    depth: &[f32],
    pose: &[f32; 12],
    k: &Intrinsics,
    h: usize,
    w: usize,
    shift: &mut [f32],
    mask: &mut [f32],
    warped: &mut [f32],
    target_depth: &mut [f32],
) {
    let n = h * w;
    assert_eq!(rgb.len(), n * 3);
    assert_eq!(depth.len(), n);
    assert_eq!(shift.len(), n * 2);
    assert_eq!(mask.len(), n);
    assert_eq!(warped.len(), n * 3);
    assert_eq!(target_depth.len(), n);

    let chunks: Vec<std::ops::Range<usize>> = (0..h)
        .step_by(ROWS_PER_CHUNK)
        .map(|start| start..(start + ROWS_PER_CHUNK).min(h))
        .collect();
    let zbuf = chunks
        .into_par_iter()
        .fold(
            || vec![EMPTY; n],
            |mut acc, rows| {
                splat_rows(depth, pose, k, h, w, rows, &mut acc);
                acc
            },
        )
        .reduce_with(|mut a, b| {
            for (cell, other) in a.iter_mut().zip(b) {
                if other.better_than(*cell) {
                    *cell = other;
                }
            }
            a
        })
        .unwrap_or_else(|| vec![EMPTY; n]);

    let wf = w;
    shift
        .par_chunks_mut(2)
        .zip(mask.par_iter_mut())
        .zip(warped.par_chunks_mut(3))
        .zip(target_depth.par_iter_mut())
        .enumerate()
        .for_each(|(q, (((sh, m), col), td))| {
            let cell = zbuf[q];
            if cell.idx == u32::MAX {
                sh[0] = 0.0;
                sh[1] = 0.0;
                *m = 0.0;
                col.fill(0.0);
                *td = HOLE_DEPTH;
            } else {
                let src = cell.idx as usize;
                let (sy, sx) = (src / wf, src % wf);
                let (qy, qx) = (q / wf, q % wf);
                sh[0] = sx as f32 - qx as f32;
                sh[1] = sy as f32 - qy as f32;
                *m = 1.0;
                col.copy_from_slice(&rgb[src * 3..src * 3 + 3]);
                *td = cell.z;
            }
        });
}

/// C entry point. Buffers: rgb HxWx3, depth HxW, pose 12 (row-major [R|t]),
/// intrinsics 6 (fx, fy, cx, cy, width, height); outputs shift HxWx2, mask
/// HxW, warped HxWx3, target depth HxW. Returns 0 on success, an error code
/// otherwise; never unwinds into the caller.
#[no_mangle]
pub extern "C" fn warp_forward(
    rgb: *const f32,
    depth: *const f32,
    pose: *const f32,
    intrinsics: *const f32,
    h: u32,
    w: u32,
    shift_out: *mut f32,
    mask_out: *mut f32,
    warped_out: *mut f32,
    target_depth_out: *mut f32,
) -> i32 {
    if rgb.is_null()
        || depth.is_null()
        || pose.is_null()
        || intrinsics.is_null()
        || shift_out.is_null()
        || mask_out.is_null()
        || warped_out.is_null()
        || target_depth_out.is_null()
    {
        return ERR_NULL;
    }
    if h == 0 || w == 0 {
        return ERR_DIMENSIONS;
    }
    let result = catch_unwind(AssertUnwindSafe(|| {
        let n = (h as usize) * (w as usize);
        let intr = unsafe { slice::from_raw_parts(intrinsics, 6) };
        if intr[4] != w as f32 || intr[5] != h as f32 || intr[0] <= 0.0 || intr[1] <= 0.0 {
            return ERR_DIMENSIONS;
        }
        let k = Intrinsics { fx: intr[0], fy: intr[1], cx: intr[2], cy: intr[3] };
        let pose12: &[f32; 12] =
            unsafe { slice::from_raw_parts(pose, 12) }.try_into().unwrap();
        let rgb = unsafe { slice::from_raw_parts(rgb, n * 3) };
        let depth = unsafe { slice::from_raw_parts(depth, n) };
        let shift = unsafe { slice::from_raw_parts_mut(shift_out, n * 2) };
        let mask = unsafe { slice::from_raw_parts_mut(mask_out, n) };
        let warped = unsafe { slice::from_raw_parts_mut(warped_out, n * 3) };
        let tdepth = unsafe { slice::from_raw_parts_mut(target_depth_out, n) };
        forward_warp(
            rgb,
            depth,
            pose12,
            &k,
            h as usize,
            w as usize,
            shift,
            mask,
            warped,
            tdepth,
        );
        OK
    }));
    result.unwrap_or(ERR_PANIC)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    struct Buffers {
        shift: Vec<f32>,
        mask: Vec<f32>,
        warped: Vec<f32>,
        tdepth: Vec<f32>,
    }

    fn run(
        rgb: &[f32],
        depth: &[f32],
        pose: &[f32; 12],
        k: &Intrinsics,
        h: usize,
        w: usize,
    ) -> Buffers {
        let n = h * w;
        let mut out = Buffers {
            shift: vec![0.0; n * 2],
            mask: vec![0.0; n],
            warped: vec![0.0; n * 3],
            tdepth: vec![0.0; n],
        };
        forward_warp(
            rgb, depth, pose, k, h, w,
            &mut out.shift, &mut out.mask, &mut out.warped, &mut out.tdepth,
        );
        out
    }

    const IDENTITY: [f32; 12] = [1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0];

    fn default_k(h: usize, w: usize) -> Intrinsics {
        let f = h.max(w) as f32;
        Intrinsics {
            fx: f,
            fy: f,
            cx: (w as f32 - 1.0) / 2.0,
            cy: (h as f32 - 1.0) / 2.0,
        }
    }

    fn random_scene(rng: &mut StdRng, h: usize, w: usize) -> (Vec<f32>, Vec<f32>) {
        let rgb: Vec<f32> = (0..h * w * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
        let depth: Vec<f32> = (0..h * w)
            .map(|_| if rng.gen_bool(0.3) { 1.0 } else { rng.gen_range(0.5..3.0) })
            .collect();
        (rgb, depth)
    }

    /// Sequential single-buffer splat used as the in-crate oracle.
    fn sequential_reference(
        rgb: &[f32],
        depth: &[f32],
        pose: &[f32; 12],
        k: &Intrinsics,
        h: usize,
        w: usize,
    ) -> Buffers {
        let n = h * w;
        let mut zbuf = vec![EMPTY; n];
        splat_rows(depth, pose, k, h, w, 0..h, &mut zbuf);
        let mut out = Buffers {
            shift: vec![0.0; n * 2],
            mask: vec![0.0; n],
            warped: vec![0.0; n * 3],
            tdepth: vec![HOLE_DEPTH; n],
        };
        for q in 0..n {
            let cell = zbuf[q];
            if cell.idx == u32::MAX {
                continue;
            }
            let src = cell.idx as usize;
            out.shift[q * 2] = (src % w) as f32 - (q % w) as f32;
            out.shift[q * 2 + 1] = (src / w) as f32 - (q / w) as f32;
            out.mask[q] = 1.0;
            out.warped[q * 3..q * 3 + 3].copy_from_slice(&rgb[src * 3..src * 3 + 3]);
            out.tdepth[q] = cell.z;
        }
        out
    }

    fn assert_buffers_eq(a: &Buffers, b: &Buffers) {
        assert_eq!(a.shift, b.shift);
        assert_eq!(a.mask, b.mask);
        assert_eq!(a.warped, b.warped);
        assert!(a
            .tdepth
            .iter()
            .zip(&b.tdepth)
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn identity_pose_is_noop() {
        let (h, w) = (6, 5);
        let mut rng = StdRng::seed_from_u64(0);
        let (rgb, depth) = random_scene(&mut rng, h, w);
        let out = run(&rgb, &depth, &IDENTITY, &default_k(h, w), h, w);
        assert!(out.mask.iter().all(|&m| m == 1.0));
        assert!(out.shift.iter().all(|&s| s == 0.0));
        assert_eq!(out.warped, rgb);
        assert_eq!(out.tdepth, depth);
    }

    #[test]
    fn matches_sequential_reference_on_random_scenes() {
        let mut rng = StdRng::seed_from_u64(7);
        for case in 0..200 {
            let h = rng.gen_range(2..40);
            let w = rng.gen_range(2..40);
            let (rgb, depth) = random_scene(&mut rng, h, w);
            let scale = if case % 2 == 0 { 0.2 } else { 0.6 };
            let pose: [f32; 12] = [
                1.0, 0.0, 0.0, rng.gen_range(-scale..scale),
                0.0, 1.0, 0.0, rng.gen_range(-scale..scale),
                0.0, 0.0, 1.0, rng.gen_range(-scale..scale) * 0.5,
            ];
            let k = default_k(h, w);
            assert_buffers_eq(
                &run(&rgb, &depth, &pose, &k, h, w),
                &sequential_reference(&rgb, &depth, &pose, &k, h, w),
            );
        }
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let (h, w) = (64, 48);
        let mut rng = StdRng::seed_from_u64(3);
        let (rgb, depth) = random_scene(&mut rng, h, w);
        let pose: [f32; 12] = [1.0, 0.0, 0.0, 0.4, 0.0, 1.0, 0.0, -0.1, 0.0, 0.0, 1.0, 0.02];
        let k = default_k(h, w);
        let outputs: Vec<Buffers> = [1usize, 2, 8]
            .iter()
            .map(|&threads| {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .build()
                    .unwrap()
                    .install(|| run(&rgb, &depth, &pose, &k, h, w))
            })
            .collect();
        assert_buffers_eq(&outputs[0], &outputs[1]);
        assert_buffers_eq(&outputs[0], &outputs[2]);
    }

    #[test]
    fn z_buffer_prefers_near_then_lower_index() {
        // two columns at different depths collapse onto one target pixel
        let (h, w) = (1, 3);
        let rgb = vec![0.1, 0.1, 0.1, 0.5, 0.5, 0.5, 0.9, 0.9, 0.9];
        // fx = 3, cx = 1: pixel 0 at depth 1 shifted by tx=1/3 lands on pixel 1
        let depth = vec![1.0, 1.0, 1.0];
        let k = Intrinsics { fx: 3.0, fy: 3.0, cx: 1.0, cy: 0.0 };
        let pose: [f32; 12] = [1.0, 0.0, 0.0, 1.0 / 3.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0];
        let out = run(&rgb, &depth, &pose, &k, h, w);
        // pixels 0 and 1 collide at target 1 and 2 with equal depth: the
        // lower source index wins each cell
        assert_eq!(out.mask, vec![0.0, 1.0, 1.0]);
        assert_eq!(&out.warped[3..6], &rgb[0..3]);
        assert_eq!(&out.warped[6..9], &rgb[3..6]);
    }

    #[test]
    fn c_abi_error_codes() {
        let n = 4 * 4;
        let rgb = vec![0.0f32; n * 3];
        let depth = vec![1.0f32; n];
        let pose = IDENTITY;
        let intr = [4.0f32, 4.0, 1.5, 1.5, 4.0, 4.0];
        let mut shift = vec![0.0f32; n * 2];
        let mut mask = vec![0.0f32; n];
        let mut warped = vec![0.0f32; n * 3];
        let mut tdepth = vec![0.0f32; n];
        let ok = warp_forward(
            rgb.as_ptr(), depth.as_ptr(), pose.as_ptr(), intr.as_ptr(), 4, 4,
            shift.as_mut_ptr(), mask.as_mut_ptr(), warped.as_mut_ptr(), tdepth.as_mut_ptr(),
        );
        assert_eq!(ok, 0);
        let null = warp_forward(
            std::ptr::null(), depth.as_ptr(), pose.as_ptr(), intr.as_ptr(), 4, 4,
            shift.as_mut_ptr(), mask.as_mut_ptr(), warped.as_mut_ptr(), tdepth.as_mut_ptr(),
        );
        assert_eq!(null, ERR_NULL);
        let bad_dims = warp_forward(
            rgb.as_ptr(), depth.as_ptr(), pose.as_ptr(), intr.as_ptr(), 4, 5,
            shift.as_mut_ptr(), mask.as_mut_ptr(), warped.as_mut_ptr(), tdepth.as_mut_ptr(),
        );
        assert_eq!(bad_dims, ERR_DIMENSIONS);
    }
}
