//! Training losses with gradients, and evaluation metrics.

use rand::Rng;

use crate::error::{Error, Result};
use crate::image::{Image, Mask};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Floor on feature norms in the contrastive loss.
pub const FEATURE_EPS: f64 = 1e-8;

fn check_shapes(a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.width, a.height, a.channels, b.width, b.height, b.channels
        )));
    }
    Ok(())
}

/// Mean squared difference and its gradient with respect to `rendered`.
pub fn l2_loss(rendered: &Image, target: &Image) -> Result<(f64, Vec<f64>)> {
    check_shapes(rendered, target)?;
    let n = rendered.data.len() as f64;
    let mut loss = 0.0;
    let grad = rendered
        .data
        .iter()
        .zip(&target.data)
        .map(|(a, b)| {
            let d = a - b;
            loss += d * d;
            2.0 * d / n
        })
        .collect();
    Ok((loss / n, grad))
}

/// Mean absolute difference and its (sub)gradient.
pub fn l1_loss(rendered: &Image, target: &Image) -> Result<(f64, Vec<f64>)> {
    check_shapes(rendered, target)?;
    let n = rendered.data.len() as f64;
    let mut loss = 0.0;
    let grad = rendered
        .data
        .iter()
        .zip(&target.data)
        .map(|(a, b)| {
            let d = a - b;
            loss += d.abs();
            if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    Ok((loss / n, grad))
}

/// `10·log10(1/mse)`; identical images give `f64::INFINITY`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    check_shapes(a, b)?;
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data.len() as f64;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

/// `|a ∧ b| / |a ∨ b|`, 1 when both are empty.
pub fn mask_iou(a: &Mask, b: &Mask) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::ShapeMismatch(format!("{}x{} vs {}x{}", a.width, a.height, b.width, b.height)));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Normalized 1D Gaussian window.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let w: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Single-channel plane.
struct Plane {
    w: usize,
    h: usize,
    v: Vec<f64>,
}

/// Valid separable correlation with window `k`.
fn filter_valid(p: &Plane, k: &[f64]) -> Plane {
    let n = k.len();
    let (ow, oh) = (p.w + 1 - n, p.h + 1 - n);
    let mut tmp = vec![0.0; p.h * ow];
    for y in 0..p.h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..n).map(|i| k[i] * p.v[y * p.w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    Plane { w: ow, h: oh, v: out }
}

/// Adjoint of [`filter_valid`], back to a `w × h` plane.
fn filter_valid_transpose(g: &Plane, k: &[f64], w: usize, h: usize) -> Vec<f64> {
    let n = k.len();
    let ow = g.w;
    let mut tmp = vec![0.0; h * ow];
    for y in 0..g.h {
        for x in 0..ow {
            let v = g.v[y * ow + x];
            for i in 0..n {
                tmp[(y + i) * ow + x] += k[i] * v;
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..ow {
            let v = tmp[y * ow + x];
            for i in 0..n {
                out[y * w + x + i] += k[i] * v;
            }
        }
    }
    out
}

fn channel(img: &Image, c: usize, f: impl Fn(f64) -> f64) -> Plane {
    Plane {
        w: img.width,
        h: img.height,
        v: img.data.iter().skip(c).step_by(img.channels).map(|&v| f(v)).collect(),
    }
}

fn product(a: &Image, b: &Image, c: usize) -> Plane {
    Plane {
        w: a.width,
        h: a.height,
        v: a.data.iter().zip(&b.data).skip(c).step_by(a.channels).map(|(x, y)| x * y).collect(),
    }
}

/// Mean SSIM over valid window positions and channels, optionally with the
/// gradient of that mean with respect to `a`.
fn ssim_impl(a: &Image, b: &Image, want_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
    check_shapes(a, b)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::ImageTooSmall {
            width: a.width,
            height: a.height,
            window: SSIM_WINDOW,
        });
    }
    let k = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let (w, h, ch) = (a.width, a.height, a.channels);
    let count = ((w + 1 - SSIM_WINDOW) * (h + 1 - SSIM_WINDOW) * ch) as f64;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| vec![0.0; a.data.len()]);
    for c in 0..ch {
        let mx = filter_valid(&channel(a, c, |v| v), &k);
        let my = filter_valid(&channel(b, c, |v| v), &k);
        let xx = filter_valid(&channel(a, c, |v| v * v), &k);
        let yy = filter_valid(&channel(b, c, |v| v * v), &k);
        let xy = filter_valid(&product(a, b, c), &k);
        let m = mx.v.len();
        let (mut g_mu, mut g_xx, mut g_xy) = (vec![0.0; m], vec![0.0; m], vec![0.0; m]);
        for q in 0..m {
            let (ux, uy) = (mx.v[q], my.v[q]);
            let sx = xx.v[q] - ux * ux;
            let sy = yy.v[q] - uy * uy;
            let sxy = xy.v[q] - ux * uy;
            let n1 = 2.0 * ux * uy + c1;
            let n2 = 2.0 * sxy + c2;
            let d1 = ux * ux + uy * uy + c1;
            let d2 = sx + sy + c2;
            let s = n1 * n2 / (d1 * d2);
            total += s;
            if want_grad {
                let ds_dmu = 2.0 * uy * n2 / (d1 * d2) - s * 2.0 * ux / d1;
                let ds_dsx = -s / d2;
                let ds_dsxy = 2.0 * n1 / (d1 * d2);
                g_mu[q] = ds_dmu - 2.0 * ux * ds_dsx - uy * ds_dsxy;
                g_xx[q] = ds_dsx;
                g_xy[q] = ds_dsxy;
            }
        }
        if let Some(grad) = grad.as_mut() {
            let shape = |v| Plane { w: mx.w, h: mx.h, v };
            let t_mu = filter_valid_transpose(&shape(g_mu), &k, w, h);
            let t_xx = filter_valid_transpose(&shape(g_xx), &k, w, h);
            let t_xy = filter_valid_transpose(&shape(g_xy), &k, w, h);
            for p in 0..w * h {
                let i = p * ch + c;
                grad[i] = (t_mu[p] + 2.0 * a.data[i] * t_xx[p] + b.data[i] * t_xy[p]) / count;
            }
        }
    }
    Ok((total / count, grad))
}

pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    Ok(ssim_impl(a, b, false)?.0)
}

/// `1 − ssim(rendered, target)` and its gradient with respect to `rendered`.
pub fn dssim_loss(rendered: &Image, target: &Image) -> Result<(f64, Vec<f64>)> {
    let (s, g) = ssim_impl(rendered, target, true)?;
    Ok((1.0 - s, g.unwrap().into_iter().map(|v| -v).collect()))
}

/// A pixel pair for the contrastive loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PixelPair {
    pub i: usize,
    pub j: usize,
    pub same: bool,
}

/// Draws `batch` pixels uniformly (with replacement) and forms `batch / 2`
/// pairs alternating same-label and different-label. Same-label pairs use
/// labeled pixels only; different-label pairs may include one background
/// pixel (`None`) but never two. Pairs that cannot be formed are skipped.
pub fn sample_pairs(labels: &[Option<u32>], batch: usize, rng: &mut impl Rng) -> Vec<PixelPair> {
    if labels.is_empty() || batch < 2 {
        return Vec::new();
    }
    let picks: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..labels.len())).collect();
    let mut by_label: std::collections::BTreeMap<u32, Vec<usize>> = Default::default();
    for &p in &picks {
        if let Some(l) = labels[p] {
            by_label.entry(l).or_default().push(p);
        }
    }
    let labeled: Vec<usize> = picks.iter().copied().filter(|&p| labels[p].is_some()).collect();
    const ATTEMPTS: usize = 16;
    let mut pairs = Vec::with_capacity(batch / 2);
    for k in 0..batch / 2 {
        if k % 2 == 0 {
            if labeled.is_empty() {
                continue;
            }
            let i = labeled[rng.gen_range(0..labeled.len())];
            let group = &by_label[&labels[i].unwrap()];
            let j = group[rng.gen_range(0..group.len())];
            pairs.push(PixelPair { i, j, same: true });
        } else {
            for _ in 0..ATTEMPTS {
                let i = picks[rng.gen_range(0..picks.len())];
                let j = picks[rng.gen_range(0..picks.len())];
                if labels[i] != labels[j] {
                    pairs.push(PixelPair { i, j, same: false });
                    break;
                }
            }
        }
    }
    pairs
}

/// Mean over pairs of `1 − cos` (same label) or `cos` (different labels),
/// with gradient with respect to the `dim`-wide feature rows.
pub fn contrastive_loss(features: &[f64], dim: usize, pairs: &[PixelPair]) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; features.len()];
    if pairs.is_empty() {
        return (0.0, grad);
    }
    let scale = 1.0 / pairs.len() as f64;
    let mut loss = 0.0;
    for p in pairs {
        let fi = &features[p.i * dim..(p.i + 1) * dim];
        let fj = &features[p.j * dim..(p.j + 1) * dim];
        let ni = fi.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nj = fj.iter().map(|v| v * v).sum::<f64>().sqrt();
        let (di, dj) = (ni.max(FEATURE_EPS), nj.max(FEATURE_EPS));
        let cos = fi.iter().zip(fj).map(|(a, b)| a * b).sum::<f64>() / (di * dj);
        let sign = if p.same { -1.0 } else { 1.0 };
        loss += if p.same { 1.0 - cos } else { cos };
        // d cos/d f_i = f̂_j/d_i − cos·f_i/d_i² (second term only above the floor).
        let (ci, cj) = (if ni > FEATURE_EPS { cos / (di * di) } else { 0.0 }, if nj > FEATURE_EPS { cos / (dj * dj) } else { 0.0 });
        for d in 0..dim {
            grad[p.i * dim + d] += sign * scale * (fj[d] / (di * dj) - ci * fi[d]);
            grad[p.j * dim + d] += sign * scale * (fi[d] / (di * dj) - cj * fj[d]);
        }
    }
    (loss * scale, grad)
}
