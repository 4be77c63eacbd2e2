//! Depth-sorted alpha compositing of 2D splats with an arbitrary number of
//! payload channels, plus the reverse-mode pass.
//!
//! Splats are sorted once per frame by camera depth (ties by ascending id)
//! and binned into square tiles. The forward pass records, per pixel, the
//! final transmittance and how far into its tile list compositing went; the
//! backward pass re-walks that list back to front and recovers the running
//! transmittance by division, so no per-pixel contributor storage is needed.

use rayon::prelude::*;

use super::RenderSettings;

/// A projected Gaussian ready for compositing.
#[derive(Clone, Debug, PartialEq)]
pub struct Splat {
    pub id: u64,
    pub mean2d: [f64; 2],
    pub conic: [f64; 3],
    /// Activated opacity in `(0, 1)`.
    pub opacity: f64,
    pub depth: f64,
    /// Pixels farther than this from `mean2d` are not touched.
    pub radius: f64,
}

/// Result of compositing.
#[derive(Clone, Debug)]
pub struct RasterOutput {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Row-major `H × W × C`.
    pub image: Vec<f64>,
    /// Accumulated alpha, row-major `H × W`.
    pub alpha: Vec<f64>,
    /// Per pixel `(splat id, blend weight)` front to back, when requested.
    pub contributors: Option<Vec<Vec<(u64, f64)>>>,
    bins: TileBins,
    final_transmittance: Vec<f64>,
    /// Number of tile-list entries walked before compositing stopped.
    walked: Vec<u32>,
}

impl RasterOutput {
    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.image[i..i + self.channels]
    }

    pub fn alpha_at(&self, x: usize, y: usize) -> f64 {
        self.alpha[y * self.width + x]
    }

    /// Splat id with the largest blend weight at a pixel.
    pub fn dominant(&self, x: usize, y: usize) -> Option<u64> {
        let list = &self.contributors.as_ref()?[y * self.width + x];
        let mut best: Option<(u64, f64)> = None;
        for &(id, w) in list {
            if best.map_or(true, |(_, bw)| w > bw) {
                best = Some((id, w));
            }
        }
        best.map(|(id, _)| id)
    }
}

/// Gradients with respect to splat parameters, indexed like the input slice.
#[derive(Clone, Debug, PartialEq)]
pub struct SplatGrads {
    pub mean2d: Vec<[f64; 2]>,
    pub conic: Vec<[f64; 3]>,
    pub opacity: Vec<f64>,
    /// `n × C`.
    pub payload: Vec<f64>,
}

#[derive(Clone, Debug)]
struct TileBins {
    tile: usize,
    tiles_x: usize,
    /// Per tile, splat indices in front-to-back order.
    lists: Vec<Vec<u32>>,
}

impl TileBins {
    fn build(splats: &[Splat], width: usize, height: usize, tile: usize) -> Self {
        let tiles_x = width.div_ceil(tile);
        let tiles_y = height.div_ceil(tile);
        let mut order: Vec<u32> = (0..splats.len() as u32).collect();
        order.sort_by(|&a, &b| {
            let (sa, sb) = (&splats[a as usize], &splats[b as usize]);
            sa.depth.total_cmp(&sb.depth).then(sa.id.cmp(&sb.id))
        });
        let mut lists = vec![Vec::new(); tiles_x * tiles_y];
        for &k in &order {
            let s = &splats[k as usize];
            let Some((x0, x1)) = pixel_span(s.mean2d[0], s.radius, width) else { continue };
            let Some((y0, y1)) = pixel_span(s.mean2d[1], s.radius, height) else { continue };
            for ty in y0 / tile..=y1 / tile {
                for tx in x0 / tile..=x1 / tile {
                    lists[ty * tiles_x + tx].push(k);
                }
            }
        }
        TileBins {
            tile,
            tiles_x,
            lists,
        }
    }

    fn tile_pixels(&self, t: usize, width: usize, height: usize) -> (usize, usize, usize, usize) {
        let tx = t % self.tiles_x;
        let ty = t / self.tiles_x;
        let x0 = tx * self.tile;
        let y0 = ty * self.tile;
        (x0, (x0 + self.tile).min(width), y0, (y0 + self.tile).min(height))
    }
}

/// Inclusive range of pixel indices whose centers lie within `radius` of
/// `center` along one axis.
fn pixel_span(center: f64, radius: f64, size: usize) -> Option<(usize, usize)> {
    let lo = (center - radius - 0.5).ceil().max(0.0);
    let hi = (center + radius - 0.5).floor().min(size as f64 - 1.0);
    if !(lo <= hi) {
        return None;
    }
    Some((lo as usize, hi as usize))
}

/// Opacity of a splat at a pixel center, before the skip threshold.
#[inline]
fn splat_alpha(s: &Splat, px: f64, py: f64, settings: &RenderSettings) -> Option<(f64, f64, f64, f64)> {
    let dx = px - s.mean2d[0];
    let dy = py - s.mean2d[1];
    if dx * dx + dy * dy > s.radius * s.radius {
        return None;
    }
    let power = -0.5 * (s.conic[0] * dx * dx + s.conic[2] * dy * dy) - s.conic[1] * dx * dy;
    if power > 0.0 {
        return None;
    }
    let g = power.exp();
    let alpha = (s.opacity * g).min(settings.alpha_max);
    if alpha < settings.alpha_min {
        return None;
    }
    Some((alpha, g, dx, dy))
}

struct TileForward {
    image: Vec<f64>,
    alpha: Vec<f64>,
    final_t: Vec<f64>,
    walked: Vec<u32>,
    contributors: Vec<Vec<(u64, f64)>>,
}

/// Composites `splats` front to back. `payload` holds `channels` values per
/// splat, in the same order as `splats`.
pub fn rasterize(
    splats: &[Splat],
    payload: &[f64],
    channels: usize,
    width: usize,
    height: usize,
    settings: &RenderSettings,
    keep_contributors: bool,
) -> RasterOutput {
    assert_eq!(payload.len(), splats.len() * channels, "payload size mismatch");
    let bins = TileBins::build(splats, width, height, settings.tile_size);
    let tiles: Vec<TileForward> = (0..bins.lists.len())
        .into_par_iter()
        .map(|t| {
            let (x0, x1, y0, y1) = bins.tile_pixels(t, width, height);
            let list = &bins.lists[t];
            let npx = (x1 - x0) * (y1 - y0);
            let mut out = TileForward {
                image: vec![0.0; npx * channels],
                alpha: vec![0.0; npx],
                final_t: vec![1.0; npx],
                walked: vec![0; npx],
                contributors: if keep_contributors { vec![Vec::new(); npx] } else { Vec::new() },
            };
            let mut p = 0;
            for y in y0..y1 {
                for x in x0..x1 {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let mut t_acc = 1.0;
                    let mut acc = 0.0;
                    let mut walked = 0u32;
                    let color = &mut out.image[p * channels..(p + 1) * channels];
                    for (pos, &k) in list.iter().enumerate() {
                        let s = &splats[k as usize];
                        let Some((alpha, ..)) = splat_alpha(s, px, py, settings) else { continue };
                        let next_t = t_acc * (1.0 - alpha);
                        if next_t < settings.transmittance_min {
                            break;
                        }
                        let w = alpha * t_acc;
                        let pl = &payload[k as usize * channels..(k as usize + 1) * channels];
                        for c in 0..channels {
                            color[c] += pl[c] * w;
                        }
                        if keep_contributors {
                            out.contributors[p].push((s.id, w));
                        }
                        acc += w;
                        t_acc = next_t;
                        walked = pos as u32 + 1;
                    }
                    // Sum of weights rather than 1 - T so a unit payload reproduces it exactly.
                    out.alpha[p] = acc;
                    out.final_t[p] = t_acc;
                    out.walked[p] = walked;
                    p += 1;
                }
            }
            out
        })
        .collect();

    let mut image = vec![0.0; width * height * channels];
    let mut alpha = vec![0.0; width * height];
    let mut final_transmittance = vec![1.0; width * height];
    let mut walked = vec![0; width * height];
    let mut contributors = keep_contributors.then(|| vec![Vec::new(); width * height]);
    for (t, tile) in tiles.into_iter().enumerate() {
        let (x0, x1, y0, y1) = bins.tile_pixels(t, width, height);
        let mut contrib_iter = tile.contributors.into_iter();
        let mut p = 0;
        for y in y0..y1 {
            for x in x0..x1 {
                let g = y * width + x;
                image[g * channels..(g + 1) * channels]
                    .copy_from_slice(&tile.image[p * channels..(p + 1) * channels]);
                alpha[g] = tile.alpha[p];
                final_transmittance[g] = tile.final_t[p];
                walked[g] = tile.walked[p];
                if let Some(c) = contributors.as_mut() {
                    c[g] = contrib_iter.next().unwrap_or_default();
                }
                p += 1;
            }
        }
    }
    RasterOutput {
        width,
        height,
        channels,
        image,
        alpha,
        contributors,
        bins,
        final_transmittance,
        walked,
    }
}

struct TileBackward {
    mean2d: Vec<[f64; 2]>,
    conic: Vec<[f64; 3]>,
    opacity: Vec<f64>,
    payload: Vec<f64>,
}

/// Reverse pass of [`rasterize`] given `d_image` (same layout as the image).
pub fn rasterize_backward(
    splats: &[Splat],
    payload: &[f64],
    out: &RasterOutput,
    d_image: &[f64],
    settings: &RenderSettings,
) -> SplatGrads {
    let channels = out.channels;
    let (width, height) = (out.width, out.height);
    assert_eq!(d_image.len(), out.image.len(), "gradient image size mismatch");
    let bins = &out.bins;

    let tiles: Vec<TileBackward> = (0..bins.lists.len())
        .into_par_iter()
        .map(|t| {
            let list = &bins.lists[t];
            let n = list.len();
            let mut g = TileBackward {
                mean2d: vec![[0.0; 2]; n],
                conic: vec![[0.0; 3]; n],
                opacity: vec![0.0; n],
                payload: vec![0.0; n * channels],
            };
            if n == 0 {
                return g;
            }
            let (x0, x1, y0, y1) = bins.tile_pixels(t, width, height);
            let mut behind = vec![0.0; channels];
            for y in y0..y1 {
                for x in x0..x1 {
                    let pix = y * width + x;
                    let d_pix = &d_image[pix * channels..(pix + 1) * channels];
                    if d_pix.iter().all(|&v| v == 0.0) {
                        continue;
                    }
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let mut t_acc = out.final_transmittance[pix];
                    behind.iter_mut().for_each(|b| *b = 0.0);
                    for pos in (0..out.walked[pix] as usize).rev() {
                        let k = list[pos] as usize;
                        let s = &splats[k];
                        let Some((alpha, gauss, dx, dy)) = splat_alpha(s, px, py, settings) else { continue };
                        t_acc /= 1.0 - alpha;
                        let w = alpha * t_acc;
                        let pl = &payload[k * channels..(k + 1) * channels];
                        let mut d_alpha = 0.0;
                        for c in 0..channels {
                            g.payload[pos * channels + c] += w * d_pix[c];
                            d_alpha += (pl[c] - behind[c]) * d_pix[c];
                            behind[c] = alpha * pl[c] + (1.0 - alpha) * behind[c];
                        }
                        d_alpha *= t_acc;
                        if s.opacity * gauss > settings.alpha_max {
                            continue;
                        }
                        g.opacity[pos] += d_alpha * gauss;
                        let d_power = d_alpha * alpha;
                        let [a, b, c] = s.conic;
                        g.mean2d[pos][0] += d_power * (a * dx + b * dy);
                        g.mean2d[pos][1] += d_power * (b * dx + c * dy);
                        g.conic[pos][0] += -0.5 * dx * dx * d_power;
                        g.conic[pos][1] += -dx * dy * d_power;
                        g.conic[pos][2] += -0.5 * dy * dy * d_power;
                    }
                }
            }
            g
        })
        .collect();

    let n = splats.len();
    let mut grads = SplatGrads {
        mean2d: vec![[0.0; 2]; n],
        conic: vec![[0.0; 3]; n],
        opacity: vec![0.0; n],
        payload: vec![0.0; n * channels],
    };
    for (t, tile) in tiles.iter().enumerate() {
        for (pos, &k) in bins.lists[t].iter().enumerate() {
            let k = k as usize;
            for a in 0..2 {
                grads.mean2d[k][a] += tile.mean2d[pos][a];
            }
            for a in 0..3 {
                grads.conic[k][a] += tile.conic[pos][a];
            }
            grads.opacity[k] += tile.opacity[pos];
            for c in 0..channels {
                grads.payload[k * channels + c] += tile.payload[pos * channels + c];
            }
        }
    }
    grads
}
