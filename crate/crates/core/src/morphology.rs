//! Low-level binary and scalar volume operators: Euclidean distance transform,
//! separable Gaussian blur, square-element 2D morphology and the 3x3x3
//! majority vote.

use crate::volume::Dims;

const EDT_INF: f32 = 1.0e20;

/// 1D squared-distance transform (lower envelope of parabolas rooted at the
/// finite samples of `f`).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let mut k: isize = -1;
    for q in 0..f.len() {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            if k < 0 {
                k = 0;
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
                break;
            }
            let p = v[k as usize];
            let (qf, pf) = (q as f64, p as f64);
            let s = ((f[q] + qf * qf) - (f[p] + pf * pf)) / (2.0 * (qf - pf));
            if s <= z[k as usize] {
                k -= 1;
                continue;
            }
            k += 1;
            v[k as usize] = q;
            z[k as usize] = s;
            z[k as usize + 1] = f64::INFINITY;
            break;
        }
    }
    if k < 0 {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0usize;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance (in voxel units) from every voxel to the nearest
/// voxel with `feature[i] == true`. Voxels are at integer positions; with no
/// features at all every entry is a very large value.
pub fn edt_squared(feature: &[bool], dims: Dims) -> Vec<f32> {
    let mut d: Vec<f64> = feature.iter().map(|&f| if f { 0.0 } else { f64::INFINITY }).collect();
    let n_max = dims.nx.max(dims.ny).max(dims.nz);
    let mut line = vec![0.0f64; n_max];
    let mut out = vec![0.0f64; n_max];
    let mut v = vec![0usize; n_max];
    let mut z = vec![0.0f64; n_max + 1];
    let (nx, ny, nz) = (dims.nx, dims.ny, dims.nz);
    let mut pass = |len: usize, count: usize, idx: &dyn Fn(usize, usize) -> usize, d: &mut Vec<f64>| {
        for c in 0..count {
            for i in 0..len {
                line[i] = d[idx(c, i)];
            }
            edt_1d(&line[..len], &mut out[..len], &mut v, &mut z);
            for i in 0..len {
                d[idx(c, i)] = out[i];
            }
        }
    };
    pass(nx, ny * nz, &|c, i| c * nx + i, &mut d);
    pass(ny, nx * nz, &|c, i| (c / nx) * nx * ny + i * nx + c % nx, &mut d);
    pass(nz, nx * ny, &|c, i| i * nx * ny + c, &mut d);
    d.into_iter().map(|v| if v.is_finite() { v as f32 } else { EDT_INF }).collect()
}

/// Normalized, truncated (at 3 sigma) Gaussian kernel.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable convolution along one axis with zero boundary.
pub fn convolve_axis(data: &[f32], dims: Dims, axis: usize, kernel: &[f64]) -> Vec<f32> {
    let r = kernel.len() / 2;
    let n = dims.as_array()[axis];
    let stride = match axis {
        0 => 1,
        1 => dims.nx,
        _ => dims.nx * dims.ny,
    };
    let mut out = vec![0.0f32; data.len()];
    let mut line = vec![0.0f32; n + 2 * r];
    let starts: Vec<usize> = (0..dims.len()).filter(|&i| (i / stride) % n == 0).collect();
    for s in starts {
        for i in 0..n {
            line[r + i] = data[s + i * stride];
        }
        for i in 0..n {
            let acc: f64 = kernel.iter().zip(&line[i..i + kernel.len()]).map(|(w, v)| w * *v as f64).sum();
            out[s + i * stride] = acc as f32;
        }
    }
    out
}

/// Binary erosion (`dilate == false`) or dilation by a (2r+1)-wide square,
/// computed separably. Out-of-image pixels read as `oob`.
fn square_filter_2d(mask: &[bool], nx: usize, ny: usize, r: usize, dilate: bool, oob: bool) -> Vec<bool> {
    let pass = |src: &[bool], along_x: bool| -> Vec<bool> {
        let mut dst = vec![false; src.len()];
        let (len, count) = if along_x { (nx, ny) } else { (ny, nx) };
        let at = |c: usize, i: usize| if along_x { c * nx + i } else { i * nx + c };
        for c in 0..count {
            for i in 0..len {
                let lo = i as isize - r as isize;
                let hi = i as isize + r as isize;
                let mut hit_oob = false;
                let mut any = false;
                let mut all = true;
                for q in lo..=hi {
                    if q < 0 || q >= len as isize {
                        hit_oob = true;
                        continue;
                    }
                    let v = src[at(c, q as usize)];
                    any |= v;
                    all &= v;
                }
                if hit_oob {
                    any |= oob;
                    all &= oob;
                }
                dst[at(c, i)] = if dilate { any } else { all };
            }
        }
        dst
    };
    let tmp = pass(mask, true);
    pass(&tmp, false)
}

pub fn erode_2d(mask: &[bool], nx: usize, ny: usize, r: usize) -> Vec<bool> {
    square_filter_2d(mask, nx, ny, r, false, false)
}

pub fn dilate_2d(mask: &[bool], nx: usize, ny: usize, r: usize) -> Vec<bool> {
    square_filter_2d(mask, nx, ny, r, true, false)
}

/// Morphological opening by a (2r+1)-square; the image border acts as background.
pub fn open_2d(mask: &[bool], nx: usize, ny: usize, r: usize) -> Vec<bool> {
    dilate_2d(&erode_2d(mask, nx, ny, r), nx, ny, r)
}

/// Morphological closing by a (2r+1)-square, computed as on an unbounded
/// background-filled plane (the image is padded by `r` first).
pub fn close_2d(mask: &[bool], nx: usize, ny: usize, r: usize) -> Vec<bool> {
    let (px, py) = (nx + 2 * r, ny + 2 * r);
    let mut padded = vec![false; px * py];
    for y in 0..ny {
        padded[(y + r) * px + r..(y + r) * px + r + nx].copy_from_slice(&mask[y * nx..(y + 1) * nx]);
    }
    let closed = erode_2d(&dilate_2d(&padded, px, py, r), px, py, r);
    let mut out = Vec::with_capacity(nx * ny);
    for y in 0..ny {
        out.extend_from_slice(&closed[(y + r) * px + r..(y + r) * px + r + nx]);
    }
    out
}

/// Binary 3x3x3 median: a voxel is set when at least 14 of its 27 neighbours
/// are set. Neighbourhoods are clamped at the volume edges (replicate padding).
pub fn majority_3x3x3(mask: &[bool], dims: Dims) -> Vec<bool> {
    let (nx, ny, nz) = (dims.nx, dims.ny, dims.nz);
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    // box sums along x, then y, then z with replicated borders
    let mut sx = vec![0u8; mask.len()];
    for z in 0..nz {
        for y in 0..ny {
            let row = dims.index(0, y, z);
            for x in 0..nx {
                let xi = x as isize;
                sx[row + x] = mask[row + clamp(xi - 1, nx)] as u8 + mask[row + x] as u8 + mask[row + clamp(xi + 1, nx)] as u8;
            }
        }
    }
    let mut sy = vec![0u8; mask.len()];
    for z in 0..nz {
        for y in 0..ny {
            let yi = y as isize;
            let (a, b, c) = (dims.index(0, clamp(yi - 1, ny), z), dims.index(0, y, z), dims.index(0, clamp(yi + 1, ny), z));
            for x in 0..nx {
                sy[b + x] = sx[a + x] + sx[b + x] + sx[c + x];
            }
        }
    }
    let mut out = vec![false; mask.len()];
    for z in 0..nz {
        let zi = z as isize;
        let (za, zc) = (clamp(zi - 1, nz), clamp(zi + 1, nz));
        for y in 0..ny {
            let (a, b, c) = (dims.index(0, y, za), dims.index(0, y, z), dims.index(0, y, zc));
            for x in 0..nx {
                out[b + x] = sy[a + x] + sy[b + x] + sy[c + x] >= 14;
            }
        }
    }
    out
}

/// Corner-preserving variant of [`majority_3x3x3`]: a voxel flips only when
/// the 3x3x3 majority disagrees with it *and* at least 4 of its 6 face
/// neighbours do. Speckle and thin spurs are removed while the corners and
/// edges of convex blobs survive, so voxelized cubes and balls are fixed
/// points and repeated smoothing does not erode small cavities away.
pub fn conservative_majority_3x3x3(mask: &[bool], dims: Dims) -> Vec<bool> {
    let majority = majority_3x3x3(mask, dims);
    let (nx, ny, nz) = (dims.nx, dims.ny, dims.nz);
    let mut out = mask.to_vec();
    for i in 0..mask.len() {
        if majority[i] == mask[i] {
            continue;
        }
        let (x, y, z) = dims.coords(i);
        let v = mask[i];
        // out-of-grid neighbours replicate the voxel itself and so agree
        let mut disagree = 0;
        if x > 0 && mask[i - 1] != v {
            disagree += 1;
        }
        if x + 1 < nx && mask[i + 1] != v {
            disagree += 1;
        }
        if y > 0 && mask[i - nx] != v {
            disagree += 1;
        }
        if y + 1 < ny && mask[i + nx] != v {
            disagree += 1;
        }
        if z > 0 && mask[i - nx * ny] != v {
            disagree += 1;
        }
        if z + 1 < nz && mask[i + nx * ny] != v {
            disagree += 1;
        }
        if disagree >= 4 {
            out[i] = !v;
        }
    }
    out
}

/// Repeats [`conservative_majority_3x3x3`] until nothing changes or
/// `max_passes` is reached; returns the mask and whether it converged.
/// Convergence makes the result a fixed point of the filter.
pub fn conservative_majority_fixed_point(mask: &[bool], dims: Dims, max_passes: usize) -> (Vec<bool>, bool) {
    let mut cur = mask.to_vec();
    for _ in 0..max_passes {
        let next = conservative_majority_3x3x3(&cur, dims);
        if next == cur {
            return (cur, true);
        }
        cur = next;
    }
    (cur, false)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_edt(feature: &[bool], dims: Dims) -> Vec<f32> {
        (0..dims.len())
            .map(|i| {
                let (x, y, z) = dims.coords(i);
                let mut best = f32::MAX;
                for (j, f) in feature.iter().enumerate() {
                    if *f {
                        let (a, b, c) = dims.coords(j);
                        let d = (x as f32 - a as f32).powi(2) + (y as f32 - b as f32).powi(2) + (z as f32 - c as f32).powi(2);
                        best = best.min(d);
                    }
                }
                best
            })
            .collect()
    }

    #[test]
    fn edt_matches_brute_force() {
        let dims = Dims::new(7, 5, 6);
        let mut state = 12345u64;
        let feature: Vec<bool> = (0..dims.len())
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (state >> 33) % 11 == 0
            })
            .collect();
        assert!(feature.iter().any(|f| *f));
        assert_eq!(edt_squared(&feature, dims), brute_edt(&feature, dims));
    }

    #[test]
    fn edt_single_feature_and_empty() {
        let dims = Dims::new(5, 1, 1);
        let mut f = vec![false; 5];
        f[4] = true;
        assert_eq!(edt_squared(&f, dims), vec![16.0, 9.0, 4.0, 1.0, 0.0]);
        assert!(edt_squared(&[false; 5], dims).iter().all(|v| *v >= 1e19));
    }

    #[test]
    fn opening_closing_keep_rectangles() {
        let (nx, ny) = (20, 16);
        let mask: Vec<bool> = (0..nx * ny).map(|i| (3..15).contains(&(i % nx)) && (2..12).contains(&(i / nx))).collect();
        assert_eq!(open_2d(&mask, nx, ny, 3), mask);
        assert_eq!(close_2d(&mask, nx, ny, 3), mask);
        let full = vec![true; nx * ny];
        assert_eq!(open_2d(&full, nx, ny, 3), full);
        assert_eq!(close_2d(&full, nx, ny, 3), full);
    }

    #[test]
    fn opening_removes_spike_closing_fills_notch() {
        let (nx, ny) = (20, 20);
        let mut mask: Vec<bool> = (0..nx * ny).map(|i| (i / nx) < 10).collect();
        mask[10 * nx + 5] = true;
        let opened = open_2d(&mask, nx, ny, 3);
        assert!(!opened[10 * nx + 5]);
        assert_eq!(opened.iter().filter(|v| **v).count(), 200);
        let mut notch: Vec<bool> = (0..nx * ny).map(|i| (i / nx) < 10).collect();
        notch[9 * nx + 5] = false;
        let closed = close_2d(&notch, nx, ny, 3);
        assert!(closed[9 * nx + 5]);
    }

    #[test]
    fn majority_matches_brute_median() {
        let dims = Dims::new(6, 5, 4);
        let mut state = 7u64;
        let mask: Vec<bool> = (0..dims.len())
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
                (state >> 40) % 2 == 0
            })
            .collect();
        let out = majority_3x3x3(&mask, dims);
        for i in 0..dims.len() {
            let (x, y, z) = dims.coords(i);
            let mut vals = Vec::new();
            for dz in -1i32..=1 {
                for dy in -1i32..=1 {
                    for dx in -1i32..=1 {
                        let c = |v: usize, d: i32, n: usize| (v as i32 + d).clamp(0, n as i32 - 1) as usize;
                        vals.push(mask[dims.index(c(x, dx, 6), c(y, dy, 5), c(z, dz, 4))] as u8);
                    }
                }
            }
            vals.sort();
            assert_eq!(out[i], vals[13] == 1, "voxel {i}");
        }
    }

    #[test]
    fn convolution_matches_direct_sum() {
        let dims = Dims::new(5, 4, 3);
        let data: Vec<f32> = (0..dims.len()).map(|i| ((i * 37) % 11) as f32).collect();
        let k = [0.25, 0.5, 0.25];
        for axis in 0..3 {
            let out = convolve_axis(&data, dims, axis, &k);
            for i in 0..dims.len() {
                let c = dims.coords(i);
                let p = [c.0, c.1, c.2];
                let mut acc = 0.0;
                for (j, w) in k.iter().enumerate() {
                    let q = p[axis] as isize + j as isize - 1;
                    if q >= 0 && (q as usize) < dims.as_array()[axis] {
                        let mut pp = p;
                        pp[axis] = q as usize;
                        acc += w * data[dims.index(pp[0], pp[1], pp[2])] as f64;
                    }
                }
                assert!((out[i] as f64 - acc).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn gaussian_kernel_normalized() {
        let k = gaussian_kernel(2.0);
        assert_eq!(k.len(), 13);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(gaussian_kernel(0.0), vec![1.0]);
    }

    #[test]
    fn conservative_majority_keeps_cube_corners_and_drops_speckle() {
        let dims = Dims::new(12, 12, 12);
        let mut mask = vec![true; dims.len()];
        for z in 4..8 {
            for y in 4..8 {
                for x in 4..8 {
                    mask[dims.index(x, y, z)] = false;
                }
            }
        }
        assert_eq!(conservative_majority_3x3x3(&mask, dims), mask);
        assert_ne!(majority_3x3x3(&mask, dims), mask);
        let mut speck = mask.clone();
        speck[dims.index(1, 1, 1)] = false;
        speck[dims.index(9, 2, 10)] = false;
        assert_eq!(conservative_majority_3x3x3(&speck, dims), mask);
    }
}
