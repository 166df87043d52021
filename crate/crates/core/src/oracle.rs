//! Slow reference implementations written with explicit loops. They share no
//! kernels with the tape, so agreement between the two is evidence for both.

use crate::attention::deformable::CDAConfig;
use crate::attention::neighborhood::NAConfig;
use crate::error::Result;
use crate::params::ParamStore;
use crate::prototype::{CamConfig, GateMode, SupportBox};
use crate::tensor::{FeatureMap, Matrix};

fn project(x: &FeatureMap, w: &Matrix, b: Option<&[f64]>) -> FeatureMap {
    let (d, h, wd) = x.shape();
    FeatureMap::from_fn(w.rows(), h, wd, |o, i, j| {
        let mut acc = b.map_or(0.0, |b| b[o]);
        for c in 0..d {
            acc += w.at(o, c) * x.at(c, i, j);
        }
        acc
    })
}

fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        z += *x;
    }
    for x in v.iter_mut() {
        *x /= z;
    }
}

fn window_start(c: usize, n: usize, k: usize) -> usize {
    let s = c as i64 - (k / 2) as i64;
    s.clamp(0, (n - k) as i64) as usize
}

/// Neighborhood attention as dense attention over all `H·W` keys with the
/// scores outside each pixel's window masked to `-∞`.
pub fn na_masked_dense(x: &FeatureMap, cfg: &NAConfig, store: &ParamStore) -> Result<FeatureMap> {
    let (d, h, w) = x.shape();
    let k = cfg.window;
    let q = project(x, &store.matrix(&cfg.key("wq"))?, None);
    let kk = project(x, &store.matrix(&cfg.key("wk"))?, None);
    let v = project(x, &store.matrix(&cfg.key("wv"))?, None);
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = FeatureMap::zeros(d, h, w);
    for i in 0..h {
        for j in 0..w {
            let (r0, c0) = (window_start(i, h, k), window_start(j, w, k));
            let mut scores = vec![f64::NEG_INFINITY; h * w];
            for r in 0..h {
                for c in 0..w {
                    if r >= r0 && r < r0 + k && c >= c0 && c < c0 + k {
                        scores[r * w + c] = (0..d).map(|ch| q.at(ch, i, j) * kk.at(ch, r, c)).sum::<f64>() * scale;
                    }
                }
            }
            softmax_in_place(&mut scores);
            for ch in 0..d {
                let mut acc = 0.0;
                for (p, a) in scores.iter().enumerate() {
                    acc += a * v.at(ch, p / w, p % w);
                }
                out.set(ch, i, j, acc);
            }
        }
    }
    Ok(out)
}

/// Bilinear read at pixel-index position `(px, py)`; zero outside the map.
pub fn bilinear_at(x: &FeatureMap, ch: usize, px: f64, py: f64) -> f64 {
    let (_, h, w) = x.shape();
    let (x0, y0) = (px.floor(), py.floor());
    let (fx, fy) = (px - x0, py - y0);
    let mut acc = 0.0;
    for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
        for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
            let (r, c) = (y0 + dy, x0 + dx);
            if r >= 0.0 && c >= 0.0 && (r as usize) < h && (c as usize) < w {
                acc += wy * wx * x.at(ch, r as usize, c as usize);
            }
        }
    }
    acc
}

fn conv_ffn(x: &FeatureMap, cfg: &CDAConfig, store: &ParamStore) -> Result<FeatureMap> {
    let hidden = project(x, &store.matrix(&cfg.key("ffn1_w"))?, Some(store.value(&cfg.key("ffn1_b"))?));
    let (dh, h, w) = hidden.shape();
    let hidden = FeatureMap::from_fn(dh, h, w, |c, i, j| hidden.at(c, i, j).max(0.0));
    Ok(project(&hidden, &store.matrix(&cfg.key("ffn2_w"))?, Some(store.value(&cfg.key("ffn2_b"))?)))
}

/// Cross-attention from every query pixel to every pixel of `f_kv`, followed
/// by the residual ConvFFN. Equals cross-deformable attention when the offset
/// net outputs zero and the stride is 1.
pub fn cross_attention_dense(
    f_res: &FeatureMap,
    f_query: &FeatureMap,
    f_kv: &FeatureMap,
    cfg: &CDAConfig,
    store: &ParamStore,
) -> Result<FeatureMap> {
    let (_, h, w) = f_kv.shape();
    let mut px = Vec::with_capacity(h * w);
    let mut py = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            px.push(j as f64);
            py.push(i as f64);
        }
    }
    attend_points(f_res, f_query, f_kv, &px, &py, cfg, store)
}

fn attend_points(
    f_res: &FeatureMap,
    f_query: &FeatureMap,
    f_kv: &FeatureMap,
    px: &[f64],
    py: &[f64],
    cfg: &CDAConfig,
    store: &ParamStore,
) -> Result<FeatureMap> {
    let (d, h, w) = f_query.shape();
    let n = px.len();
    let sampled: Vec<Vec<f64>> = (0..n)
        .map(|p| (0..d).map(|c| bilinear_at(f_kv, c, px[p], py[p])).collect())
        .collect();
    let (wq, wk, wv) = (
        store.matrix(&cfg.key("wq"))?,
        store.matrix(&cfg.key("wk"))?,
        store.matrix(&cfg.key("wv"))?,
    );
    let lin = |m: &Matrix, v: &[f64]| -> Vec<f64> { (0..d).map(|o| (0..d).map(|c| m.at(o, c) * v[c]).sum()).collect() };
    let keys: Vec<Vec<f64>> = sampled.iter().map(|s| lin(&wk, s)).collect();
    let vals: Vec<Vec<f64>> = sampled.iter().map(|s| lin(&wv, s)).collect();
    let scale = 1.0 / (d as f64).sqrt();
    let mut pre = f_query.clone();
    for i in 0..h {
        for j in 0..w {
            let q = lin(&wq, &f_query.pixel(i, j));
            let mut a: Vec<f64> = keys
                .iter()
                .map(|k| q.iter().zip(k).map(|(x, y)| x * y).sum::<f64>() * scale)
                .collect();
            softmax_in_place(&mut a);
            for c in 0..d {
                let v: f64 = a.iter().zip(&vals).map(|(a, v)| a * v[c]).sum();
                pre.set(c, i, j, pre.at(c, i, j) + v);
            }
        }
    }
    let refined = conv_ffn(&pre, cfg, store)?;
    Ok(FeatureMap::from_fn(d, h, w, |c, i, j| f_res.at(c, i, j) + refined.at(c, i, j)))
}

/// Offset net evaluated pixel by pixel: `[2, H_G·W_G]`, row 0 = Δx.
pub fn offset_net_direct(f_src: &FeatureMap, cfg: &CDAConfig, store: &ParamStore) -> Result<Matrix> {
    let (d, h, w) = f_src.shape();
    let (k, r) = (cfg.offset_kernel, cfg.stride);
    let u = project(f_src, &store.matrix(&cfg.key("wu"))?, None);
    let dw = store.matrix(&cfg.key("dw"))?;
    let dw_b = store.value(&cfg.key("dw_b"))?;
    let (ln_g, ln_b) = (store.value(&cfg.key("ln_g"))?, store.value(&cfg.key("ln_b"))?);
    let off_w = store.matrix(&cfg.key("off_w"))?;
    let off_b = store.value(&cfg.key("off_b"))?;
    let (hg, wg) = (h / r, w / r);
    let pad = (k / 2) as i64;
    // zero-padded depthwise conv, taps centred on every r-th pixel
    let origin = |a: usize| (a * r) as i64;
    let mut out = Matrix::zeros(2, hg * wg);
    for a in 0..hg {
        for b in 0..wg {
            let mut z = vec![0.0; d];
            for (c, zc) in z.iter_mut().enumerate() {
                let mut acc = dw_b[c];
                for ki in 0..k {
                    for kj in 0..k {
                        let (ii, jj) = (origin(a) + ki as i64 - pad, origin(b) + kj as i64 - pad);
                        if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w {
                            acc += dw.at(c, ki * k + kj) * u.at(c, ii as usize, jj as usize);
                        }
                    }
                }
                *zc = acc;
            }
            let mean = z.iter().sum::<f64>() / d as f64;
            let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let act: Vec<f64> = (0..d)
                .map(|c| {
                    let n = (z[c] - mean) / (var + cfg.ln_eps).sqrt() * ln_g[c] + ln_b[c];
                    0.5 * n * (1.0 + libm::erf(n / std::f64::consts::SQRT_2))
                })
                .collect();
            for o in 0..2 {
                let raw = off_b[o] + (0..d).map(|c| off_w.at(o, c) * act[c]).sum::<f64>();
                out.set(o, a * wg + b, cfg.offset_scale * raw.tanh());
            }
        }
    }
    Ok(out)
}

/// Cross-deformable attention from first principles: direct offset net,
/// cell-centre reference points, explicit bilinear reads.
pub fn cda_direct(
    f_res: &FeatureMap,
    f_query: &FeatureMap,
    f_kv: &FeatureMap,
    cfg: &CDAConfig,
    store: &ParamStore,
) -> Result<FeatureMap> {
    let (_, h, w) = f_kv.shape();
    let r = cfg.stride;
    let offsets = offset_net_direct(f_kv, cfg, store)?;
    let (hg, wg) = (h / r, w / r);
    let to_px = |norm: f64, size: usize| (norm + 1.0) / 2.0 * (size as f64 - 1.0);
    let to_norm = |p: f64, size: usize| if size > 1 { 2.0 * p / (size as f64 - 1.0) - 1.0 } else { 0.0 };
    let mut px = Vec::with_capacity(hg * wg);
    let mut py = Vec::with_capacity(hg * wg);
    for a in 0..hg {
        for b in 0..wg {
            let n = a * wg + b;
            let cy = (a as f64 + 0.5) * r as f64 - 0.5;
            let cx = (b as f64 + 0.5) * r as f64 - 0.5;
            px.push(to_px(to_norm(cx, w) + offsets.at(0, n), w));
            py.push(to_px(to_norm(cy, h) + offsets.at(1, n), h));
        }
    }
    attend_points(f_res, f_query, f_kv, &px, &py, cfg, store)
}

/// NA on both modalities, CDA both ways, then the 1×1 fusion conv over
/// `[IR; RGB]`.
pub fn fusion_direct(rgb: &FeatureMap, ir: &FeatureMap, cfg: &crate::fusion::FusionConfig, store: &ParamStore) -> Result<FeatureMap> {
    let rgb_na = na_masked_dense(rgb, &cfg.na_rgb, store)?;
    let ir_na = na_masked_dense(ir, &cfg.na_ir, store)?;
    let rgb_up = cda_direct(rgb, &rgb_na, &ir_na, &cfg.cda_rgb, store)?;
    let ir_up = cda_direct(ir, &ir_na, &rgb_na, &cfg.cda_ir, store)?;
    let (d, h, w) = rgb.shape();
    let cat = FeatureMap::from_fn(2 * d, h, w, |c, i, j| if c < d { ir_up.at(c, i, j) } else { rgb_up.at(c - d, i, j) });
    Ok(project(&cat, &store.matrix("fuse.w")?, Some(store.value("fuse.b")?)))
}

/// Prototype aggregation per query pixel with scalar loops.
pub fn cam_direct(f_q: &FeatureMap, s: &Matrix, t: &Matrix, cfg: &CamConfig, store: &ParamStore) -> Result<FeatureMap> {
    let (d, h, w) = f_q.shape();
    let c = s.rows();
    let wm = store.matrix("cam.w")?;
    let (w1, b1) = (store.matrix("cam.ffn1_w")?, store.value("cam.ffn1_b")?);
    let (w2, b2) = (store.matrix("cam.ffn2_w")?, store.value("cam.ffn2_b")?);
    // row vector times W
    let rw = |x: &[f64]| -> Vec<f64> { (0..d).map(|o| (0..d).map(|k| x[k] * wm.at(k, o)).sum()).collect() };
    let keys: Vec<Vec<f64>> = (0..c).map(|r| rw(s.row(r))).collect();
    let mut out = FeatureMap::zeros(d, h, w);
    for i in 0..h {
        for j in 0..w {
            let x = f_q.pixel(i, j);
            let q = rw(&x);
            let mut a: Vec<f64> = keys
                .iter()
                .map(|k| q.iter().zip(k).map(|(u, v)| u * v).sum::<f64>() / (d as f64).sqrt())
                .collect();
            softmax_in_place(&mut a);
            let comb: Vec<f64> = (0..d)
                .map(|k| {
                    let matched: f64 = (0..c).map(|r| a[r] / (1.0 + (-s.at(r, k)).exp())).sum();
                    let qf = match cfg.gate {
                        GateMode::FilterQuery => x[k] * matched,
                        GateMode::AttentionOnly => matched,
                    };
                    qf + (0..c).map(|r| a[r] * t.at(r, k)).sum::<f64>()
                })
                .collect();
            let hid: Vec<f64> = (0..2 * d)
                .map(|o| (b1[o] + (0..d).map(|k| w1.at(o, k) * comb[k]).sum::<f64>()).max(0.0))
                .collect();
            for o in 0..d {
                out.set(o, i, j, b2[o] + (0..2 * d).map(|k| w2.at(o, k) * hid[k]).sum::<f64>());
            }
        }
    }
    Ok(out)
}

/// Pooled RoI vector: mean over `out²·samples²` bilinear reads spread evenly
/// through the box.
pub fn roi_mean_direct(f: &FeatureMap, b: &SupportBox, out: usize, samples: usize) -> Vec<f64> {
    let (d, _, _) = f.shape();
    let n = out * samples;
    let (sw, sh) = ((b.x2 - b.x1) / n as f64, (b.y2 - b.y1) / n as f64);
    (0..d)
        .map(|c| {
            let mut acc = 0.0;
            for a in 0..n {
                for bb in 0..n {
                    let x = b.x1 + (bb as f64 + 0.5) * sw;
                    let y = b.y1 + (a as f64 + 0.5) * sh;
                    acc += bilinear_at(f, c, x - 0.5, y - 0.5);
                }
            }
            acc / (n * n) as f64
        })
        .collect()
}
