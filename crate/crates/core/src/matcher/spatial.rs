//! Exhaustive spatial-domain similarity baselines.

use super::{CorrelationSurface, MatchError, Result};
use crate::raster::RasterGrid;

fn check_sizes(template: &RasterGrid, search: &RasterGrid) -> Result<(usize, usize)> {
    let (tw, th, sw, sh) = (template.width(), template.height(), search.width(), search.height());
    if tw == 0 || th == 0 || sw < tw || sh < th {
        return Err(MatchError::SizeMismatch {
            template: (tw, th),
            search: (sw, sh),
        });
    }
    Ok((sw - tw + 1, sh - th + 1))
}

/// Summed-area table with one leading zero row and column.
fn integral(grid: &RasterGrid, square: bool) -> Vec<f64> {
    let (w, h) = (grid.width(), grid.height());
    let mut s = vec![0.0; (w + 1) * (h + 1)];
    for r in 0..h {
        let mut run = 0.0;
        for c in 0..w {
            let v = grid.get(c, r);
            run += if square { v * v } else { v };
            s[(r + 1) * (w + 1) + c + 1] = s[r * (w + 1) + c + 1] + run;
        }
    }
    s
}

fn box_sum(s: &[f64], stride: usize, c: usize, r: usize, w: usize, h: usize) -> f64 {
    s[(r + h) * stride + c + w] - s[r * stride + c + w] - s[(r + h) * stride + c] + s[r * stride + c]
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    acc[0] + acc[1] + acc[2] + acc[3] + tail
}

/// Normalized cross-correlation of `template` at every placement inside
/// `search`. Surface cell `(i, j)` is the placement whose top-left corner is
/// `(i, j)`; offset zero is the centered placement. Windows without variance
/// score 0.
pub fn ncc_map(template: &RasterGrid, search: &RasterGrid) -> Result<CorrelationSurface> {
    let (ow, oh) = check_sizes(template, search)?;
    let (tw, th) = (template.width(), template.height());
    let n = (tw * th) as f64;
    let mean = template.pixels().iter().sum::<f64>() / n;
    let t: Vec<f64> = template.pixels().iter().map(|v| v - mean).collect();
    let tnorm2: f64 = t.iter().map(|v| v * v).sum();
    let tscale: f64 = template.pixels().iter().map(|v| v * v).sum::<f64>().max(1.0);
    if tnorm2 <= 1e-12 * tscale {
        return Err(MatchError::Degenerate("template has zero variance".into()));
    }
    let (s1, s2) = (integral(search, false), integral(search, true));
    let stride = search.width() + 1;
    let sw = search.width();
    let sp = search.pixels();
    let mut values = vec![0.0; ow * oh];
    for j in 0..oh {
        for i in 0..ow {
            let sum = box_sum(&s1, stride, i, j, tw, th);
            let sumsq = box_sum(&s2, stride, i, j, tw, th);
            let var = sumsq - sum * sum / n;
            if var <= 1e-12 * sumsq.max(1.0) {
                continue;
            }
            let mut num = 0.0;
            for r in 0..th {
                let row = &sp[(j + r) * sw + i..(j + r) * sw + i + tw];
                num += dot(&t[r * tw..(r + 1) * tw], row);
            }
            values[j * ow + i] = (num / (tnorm2 * var).sqrt()).clamp(-1.0, 1.0);
        }
    }
    Ok(CorrelationSurface::new(ow, oh, (ow - 1) / 2, (oh - 1) / 2, values))
}

/// Equal-frequency bin labels: samples are ranked and the rank of each
/// value's first occurrence picks the bin, so ties share a bin and any
/// strictly increasing remap leaves the labels unchanged.
pub fn quantile_bins(values: &[f64], bins: usize) -> Vec<u16> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0u16; n];
    let mut first = 0;
    for (k, &i) in order.iter().enumerate() {
        if k > 0 && values[i] != values[order[k - 1]] {
            first = k;
        }
        out[i] = ((first * bins) / n) as u16;
    }
    out
}

fn plugin_entropy(counts: &[u32], n: f64) -> (f64, usize) {
    let mut h = 0.0;
    let mut nonempty = 0;
    for &c in counts {
        if c > 0 {
            let p = c as f64 / n;
            h -= p * p.ln();
            nonempty += 1;
        }
    }
    (h, nonempty)
}

/// Shannon entropy in nats of the quantile-binned samples, with the
/// Miller–Madow small-sample correction.
pub fn entropy(grid: &RasterGrid, bins: usize) -> Result<f64> {
    if bins < 2 {
        return Err(MatchError::InvalidParams("bins must be >= 2".into()));
    }
    let labels = quantile_bins(grid.pixels(), bins);
    let mut counts = vec![0u32; bins];
    for &l in &labels {
        counts[l as usize] += 1;
    }
    let n = labels.len() as f64;
    let (h, k) = plugin_entropy(&counts, n);
    Ok(h + (k as f64 - 1.0) / (2.0 * n))
}

fn is_constant(v: &[f64]) -> bool {
    v.iter().all(|&x| x == v[0])
}

/// Mutual information (nats) between `template` and each co-located window
/// of `search`. The template is binned by its own quantiles and the search
/// region by its quantiles; each entropy term carries the Miller–Madow
/// correction and the result is floored at zero.
pub fn mi_map(template: &RasterGrid, search: &RasterGrid, bins: usize) -> Result<CorrelationSurface> {
    if !(2..=u16::MAX as usize).contains(&bins) {
        return Err(MatchError::InvalidParams("bins must be >= 2".into()));
    }
    let (ow, oh) = check_sizes(template, search)?;
    if is_constant(template.pixels()) || is_constant(search.pixels()) {
        return Err(MatchError::Degenerate("single-valued input".into()));
    }
    let (tw, th, sw) = (template.width(), template.height(), search.width());
    let tb = quantile_bins(template.pixels(), bins);
    let sb = quantile_bins(search.pixels(), bins);
    let n = (tw * th) as f64;

    let mut tcounts = vec![0u32; bins];
    for &l in &tb {
        tcounts[l as usize] += 1;
    }
    let (ht, kt) = plugin_entropy(&tcounts, n);
    // Template labels premultiplied into joint-histogram row offsets.
    let trow: Vec<usize> = tb.iter().map(|&l| l as usize * bins).collect();

    let mut joint = vec![0u32; bins * bins];
    let mut wcounts = vec![0u32; bins];
    let mut values = vec![0.0; ow * oh];
    for j in 0..oh {
        for i in 0..ow {
            joint.iter_mut().for_each(|v| *v = 0);
            wcounts.iter_mut().for_each(|v| *v = 0);
            for r in 0..th {
                let srow = &sb[(j + r) * sw + i..(j + r) * sw + i + tw];
                let trow = &trow[r * tw..(r + 1) * tw];
                for (&t, &s) in trow.iter().zip(srow) {
                    joint[t + s as usize] += 1;
                }
            }
            for (k, &c) in joint.iter().enumerate() {
                wcounts[k % bins] += c;
            }
            let (hw, kw) = plugin_entropy(&wcounts, n);
            let (hj, kj) = plugin_entropy(&joint, n);
            let corr = (kt as f64 + kw as f64 - kj as f64 - 1.0) / (2.0 * n);
            values[j * ow + i] = (ht + hw - hj + corr).max(0.0);
        }
    }
    Ok(CorrelationSurface::new(ow, oh, (ow - 1) / 2, (oh - 1) / 2, values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(w: usize, h: usize, rng: &mut ChaCha8Rng) -> RasterGrid {
        RasterGrid::new(w, h, (0..w * h).map(|_| rng.random_range(0.0..255.0)).collect()).unwrap()
    }

    fn window(g: &RasterGrid, c0: usize, r0: usize, w: usize, h: usize) -> RasterGrid {
        RasterGrid::from_fn(w, h, |c, r| g.get(c0 + c, r0 + r)).unwrap()
    }

    fn direct_ncc(t: &RasterGrid, s: &RasterGrid, c0: usize, r0: usize) -> f64 {
        let w = window(s, c0, r0, t.width(), t.height());
        let n = t.pixels().len() as f64;
        let mt = t.pixels().iter().sum::<f64>() / n;
        let mw = w.pixels().iter().sum::<f64>() / n;
        let (mut num, mut vt, mut vw) = (0.0, 0.0, 0.0);
        for (a, b) in t.pixels().iter().zip(w.pixels()) {
            num += (a - mt) * (b - mw);
            vt += (a - mt).powi(2);
            vw += (b - mw).powi(2);
        }
        num / (vt * vw).sqrt()
    }

    #[test]
    fn ncc_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = random(31, 27, &mut rng);
        let t = random(9, 12, &mut rng);
        let map = ncc_map(&t, &s).unwrap();
        assert_eq!((map.width(), map.height()), (23, 16));
        for j in 0..16 {
            for i in 0..23 {
                assert!((map.get(i, j) - direct_ncc(&t, &s, i, j)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn ncc_positive_and_negative_unity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = random(40, 40, &mut rng);
        let t = window(&s, 11, 7, 16, 16);
        let map = ncc_map(&t, &s).unwrap();
        let (c, r, v) = map.argmax();
        assert_eq!((c, r), (11, 7));
        assert!((v - 1.0).abs() < 1e-12);
        let neg = RasterGrid::new(16, 16, t.pixels().iter().map(|v| -v).collect()).unwrap();
        let map = ncc_map(&neg, &s).unwrap();
        assert!((map.get(11, 7) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn ncc_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = random(20, 20, &mut rng);
        assert!(matches!(ncc_map(&RasterGrid::filled(5, 5, 3.0).unwrap(), &s), Err(MatchError::Degenerate(_))));
        assert!(matches!(ncc_map(&random(21, 5, &mut rng), &s), Err(MatchError::SizeMismatch { .. })));
        // A flat search window scores zero.
        let mut flat = s.clone();
        for r in 0..8 {
            for c in 0..8 {
                flat.set(c, r, 50.0);
            }
        }
        let map = ncc_map(&random(8, 8, &mut rng), &flat).unwrap();
        assert_eq!(map.get(0, 0), 0.0);
    }

    #[test]
    fn quantile_bins_handle_ties_and_balance() {
        let v = [5.0, 1.0, 1.0, 3.0, 9.0, 3.0, 7.0, 2.0];
        let b = quantile_bins(&v, 4);
        assert_eq!(b[1], b[2]);
        assert_eq!(b[3], b[5]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = random(32, 32, &mut rng);
        let b = quantile_bins(g.pixels(), 32);
        let mut counts = [0; 32];
        b.iter().for_each(|&l| counts[l as usize] += 1);
        assert!(counts.iter().all(|&c| c == 32));
    }

    #[test]
    fn mi_of_identical_window_is_template_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = random(64, 64, &mut rng);
        let map = mi_map(&t, &t, 32).unwrap();
        assert_eq!((map.width(), map.height()), (1, 1));
        let h = entropy(&t, 32).unwrap();
        assert!((map.get(0, 0) - h).abs() < 1e-12);
        assert!((h - 32f64.ln() - 31.0 / 8192.0).abs() < 1e-12);
    }

    #[test]
    fn mi_is_invariant_to_monotone_remap() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let t = random(48, 48, &mut rng);
        let remap = RasterGrid::new(48, 48, t.pixels().iter().map(|v| (v / 255.0).powf(2.0) * 1000.0 + 3.0).collect()).unwrap();
        let a = mi_map(&t, &t, 32).unwrap().get(0, 0);
        let b = mi_map(&t, &remap, 32).unwrap().get(0, 0);
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn mi_of_independent_patches_is_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let a = random(64, 64, &mut rng);
            let b = random(64, 64, &mut rng);
            let v = mi_map(&a, &b, 32).unwrap().get(0, 0);
            assert!((0.0..0.1).contains(&v), "{v}");
        }
    }

    #[test]
    fn mi_locates_remapped_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = random(40, 40, &mut rng);
        let t = window(&s, 5, 9, 20, 20);
        let inv = RasterGrid::new(20, 20, t.pixels().iter().map(|v| 255.0 - v).collect()).unwrap();
        let map = mi_map(&inv, &s, 16).unwrap();
        let (c, r, _) = map.argmax();
        assert_eq!((c, r), (5, 9));
    }

    #[test]
    fn mi_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = random(20, 20, &mut rng);
        assert!(matches!(mi_map(&RasterGrid::filled(4, 4, 1.0).unwrap(), &s, 8), Err(MatchError::Degenerate(_))));
        assert!(matches!(mi_map(&random(4, 4, &mut rng), &s, 1), Err(MatchError::InvalidParams(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn ncc_bounded_and_mi_nonnegative(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random(24, 20, &mut rng);
            let t = random(10, 8, &mut rng);
            for v in ncc_map(&t, &s).unwrap().values() {
                prop_assert!((-1.0..=1.0).contains(v));
            }
            for v in mi_map(&t, &s, 8).unwrap().values() {
                prop_assert!(*v >= 0.0);
            }
        }
    }
}
