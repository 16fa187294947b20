use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use super::{
    dictionary_keys, forward_center, Block, CenterSample, ContextMode, ContextSample, DictSource, HeadError,
    HeadOptions, HeadParams, LossBreakdown, PairBatch,
};
use crate::dict::{ConfounderDictionary, DictVariant};
use crate::linalg::{self, Matrix};
use crate::rng::{stream_rng, Stream};

/// Loss and its gradient. The gradient has the same shapes as the params.
pub fn backward(
    batch: &PairBatch,
    dicts: DictSource<'_>,
    params: &HeadParams,
    opts: &HeadOptions,
) -> Result<(LossBreakdown, HeadParams), HeadError> {
    backward_with_workers(batch, dicts, params, opts, 1)
}

/// Same as [`backward`] with centers split into contiguous chunks, one per
/// worker. Partial sums are added in chunk order.
pub fn backward_with_workers(
    batch: &PairBatch,
    dicts: DictSource<'_>,
    params: &HeadParams,
    opts: &HeadOptions,
    workers: usize,
) -> Result<(LossBreakdown, HeadParams), HeadError> {
    params.check_shapes()?;
    batch.validate(params.n(), params.dim())?;
    let b = batch.len();
    if b == 0 {
        let g = HeadParams::zeros(params.n(), params.dim(), params.sigma());
        return Ok((LossBreakdown::default(), g));
    }
    let workers = workers.clamp(1, b);
    let parts: Vec<Result<(LossBreakdown, HeadParams), HeadError>> = if workers == 1 {
        vec![accumulate(&batch.centers, b, dicts, params, opts)]
    } else {
        let chunk = b.div_ceil(workers);
        std::thread::scope(|s| {
            let handles: Vec<_> = batch
                .centers
                .chunks(chunk)
                .map(|cs| s.spawn(move || accumulate(cs, b, dicts, params, opts)))
                .collect();
            handles.into_iter().map(|h| h.join().expect("gradient worker panicked")).collect()
        })
    };
    let mut total = LossBreakdown::default();
    let mut grads = HeadParams::zeros(params.n(), params.dim(), params.sigma());
    for part in parts {
        let (l, g) = part?;
        total.self_term += l.self_term;
        total.context_term += l.context_term;
        for blk in Block::ALL {
            grads.block_mut(blk).add_assign(g.block(blk));
        }
    }
    total.total = total.self_term + total.context_term;
    total.centers = b;
    Ok((total, grads))
}

fn accumulate(
    centers: &[CenterSample],
    b_total: usize,
    dicts: DictSource<'_>,
    params: &HeadParams,
    opts: &HeadOptions,
) -> Result<(LossBreakdown, HeadParams), HeadError> {
    let (n, d, sigma) = (params.n(), params.dim(), params.sigma());
    let mut g = HeadParams::zeros(n, d, sigma);
    let mut out = LossBreakdown::default();
    let scale = 1.0 / (sigma as f64).sqrt();
    let inv_b = 1.0 / b_total as f64;

    // Key gradients are accumulated per dictionary and folded into dW4 when
    // the dictionary changes.
    let mut current: Option<(&ConfounderDictionary, Matrix, Matrix)> = None;
    let flush = |cur: &Option<(&ConfounderDictionary, Matrix, Matrix)>, g: &mut HeadParams| {
        if let Some((dict, _, dk)) = cur {
            for i in 0..dict.n() {
                g.w4.add_outer(1.0, dk.row(i), dict.entry(i));
            }
        }
    };

    for c in centers {
        let dict = dicts.for_center(c);
        let same = matches!(&current, Some((cd, _, _)) if std::ptr::eq(*cd, dict));
        if !same {
            if dict.dim() != d {
                return Err(HeadError::ShapeMismatch(format!("dictionary width {} vs head width {d}", dict.dim())));
            }
            flush(&current, &mut g);
            current = Some((dict, dictionary_keys(dict, params), Matrix::zeros(dict.n(), sigma)));
        }
        let (_, keys, dkeys) = current.as_mut().expect("dictionary set above");
        let f = forward_center(c, dict, keys, params, opts)?;
        out.self_term += f.self_loss * inv_b;
        out.context_term += f.context_loss * inv_b;

        let mut ds = f.p_self.clone();
        ds[c.class] -= 1.0;
        g.ws.add_outer(inv_b, &ds, &c.feature);

        let w_ctx = inv_b / c.contexts.len() as f64;
        for (y, cf) in c.contexts.iter().zip(&f.contexts) {
            let mut dl = cf.p.clone();
            dl[y.class] -= 1.0;
            dl.iter_mut().for_each(|v| *v *= w_ctx);
            g.w1.add_outer(1.0, &dl, &c.feature);
            if opts.mode == ContextMode::Correlation {
                continue;
            }
            g.w2.add_outer(1.0, &dl, &cf.ec);
            if opts.detach_attention || dict.variant() == DictVariant::ExpectationOnly {
                continue;
            }
            let d_ec = params.w2.matvec_t(&dl);
            let prior = dict.prior();
            let da: Vec<f64> = (0..dict.n())
                .map(|i| {
                    let z = dict.entry(i);
                    if opts.renormalize && cf.mass > 0.0 {
                        let t: f64 = z.iter().zip(&cf.ec).zip(&d_ec).map(|((zi, ei), gi)| (zi - ei) * gi).sum();
                        prior[i] * t / cf.mass
                    } else {
                        prior[i] * linalg::dot(z, &d_ec)
                    }
                })
                .collect();
            let mean = linalg::dot(&cf.a, &da);
            let mut dq = vec![0.0; sigma];
            for i in 0..dict.n() {
                let de = cf.a[i] * (da[i] - mean) * scale;
                if de == 0.0 {
                    continue;
                }
                linalg::axpy(de, keys.row(i), &mut dq);
                linalg::axpy(de, &cf.q, dkeys.row_mut(i));
            }
            g.w3.add_outer(1.0, &dq, &y.feature);
        }
    }
    flush(&current, &mut g);
    out.total = out.self_term + out.context_term;
    out.centers = centers.len();
    Ok((out, g))
}

/// Analytic vs central-difference gradient comparison.
#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    /// `(block name, max relative error, max absolute error)`
    pub blocks: Vec<(String, f64, f64)>,
    pub max_relative: f64,
    pub step: f64,
}

/// Relative error with a floor on the denominator, so entries whose
/// gradient is ~0 are judged by absolute error.
pub const GRADCHECK_FLOOR: f64 = 1e-6;

/// Random head, dictionary and batch used by the gradient check.
pub fn gradcheck_instance(
    n: usize,
    d: usize,
    sigma: usize,
    k: usize,
    centers: usize,
    seed: u64,
) -> (HeadParams, ConfounderDictionary, PairBatch) {
    let params = HeadParams::init_scaled(n, d, sigma, seed, 0.5);
    let mut rng = stream_rng(seed, Stream::DictRandom, 1);
    let mut normal = |m: usize| -> Vec<f64> { (0..m).map(|_| StandardNormal.sample(&mut rng)).collect() };
    let z = Matrix::from_vec(n, d, normal(n * d));
    let raw: Vec<f64> = normal(n).iter().map(|v| v.abs() + 0.1).collect();
    let s: f64 = raw.iter().sum();
    let dict = ConfounderDictionary::new(z, raw.iter().map(|v| v / s).collect(), DictVariant::Fixed)
        .expect("valid random dictionary");
    let mut crng = stream_rng(seed, Stream::Shuffle, 1);
    let batch = PairBatch {
        centers: (0..centers)
            .map(|i| CenterSample {
                image_id: i as u64,
                region_id: 0,
                feature: normal(d),
                class: crng.gen_range(0..n),
                contexts: (0..k)
                    .map(|_| ContextSample {
                        feature: normal(d),
                        class: crng.gen_range(0..n),
                    })
                    .collect(),
            })
            .collect(),
    };
    (params, dict, batch)
}

/// Compare [`backward`] with central differences of the loss, entry by entry.
pub fn gradcheck(
    params: &HeadParams,
    dict: &ConfounderDictionary,
    batch: &PairBatch,
    opts: &HeadOptions,
    h: f64,
) -> Result<GradcheckReport, HeadError> {
    let src = DictSource::Shared(dict);
    let (_, analytic) = backward(batch, src, params, opts)?;
    let mut p = params.clone();
    let mut blocks = Vec::new();
    let mut max_relative: f64 = 0.0;
    for blk in Block::ALL {
        let (mut rel, mut abs): (f64, f64) = (0.0, 0.0);
        for idx in 0..p.block(blk).as_slice().len() {
            let orig = p.block(blk).as_slice()[idx];
            p.block_mut(blk).as_mut_slice()[idx] = orig + h;
            let up = super::loss(batch, src, &p, opts)?.total;
            p.block_mut(blk).as_mut_slice()[idx] = orig - h;
            let down = super::loss(batch, src, &p, opts)?.total;
            p.block_mut(blk).as_mut_slice()[idx] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.block(blk).as_slice()[idx];
            let e = (a - numeric).abs();
            abs = abs.max(e);
            rel = rel.max(e / a.abs().max(numeric.abs()).max(GRADCHECK_FLOOR));
        }
        max_relative = max_relative.max(rel);
        blocks.push((blk.name().to_string(), rel, abs));
    }
    Ok(GradcheckReport {
        blocks,
        max_relative,
        step: h,
    })
}
