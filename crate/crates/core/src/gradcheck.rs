//! Finite-difference checks of every hand-written gradient, grouped by
//! parameter family.
//!
//! Relative error is `|a − fd| / max(|a|, |fd|, REL_FLOOR)`.

use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backward::{
    backprop_adapters, backprop_gate, backprop_head, backward_key, backward_query, backward_value,
    GateMode, Theta,
};
use crate::error::Result;
use crate::injection::{gather_values, inject_forward, mix_pre_attn, InjectionParams};
use crate::model::{Batch, FusionMode, Model, ModelConfig, PassOptions};
use crate::oracle::dense_surrogate_grads;
use crate::real::Real;
use crate::retrieval::{batch_retrieve, RetrievalConfig, RetrievalOutput};
use crate::symbolizer::{project_and_binarize, AdapterParams, SymbolStream};

pub const FD_STEP: f64 = 1e-5;
pub const REL_FLOOR: f64 = 1e-7;
pub const COMPONENT_TOL: f64 = 1e-4;
pub const DENSE_TOL: f64 = 1e-12;
pub const MODEL_TOL: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupReport {
    pub group: String,
    /// Relative error for FD groups, absolute for dense-loop groups.
    pub max_err: f64,
    pub tol: f64,
    pub checked: usize,
    pub pass: bool,
}

#[derive(Default)]
struct Acc {
    max: f64,
    n: usize,
}

impl Acc {
    fn rel(&mut self, analytic: f64, fd: f64) {
        let e = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(REL_FLOOR);
        self.max = self.max.max(e);
        self.n += 1;
    }

    fn abs(&mut self, a: &Array3<f64>, b: &Array3<f64>) {
        for (x, y) in a.iter().zip(b) {
            self.max = self.max.max((x - y).abs());
            self.n += 1;
        }
    }

    fn report(self, group: impl Into<String>, tol: f64) -> GroupReport {
        GroupReport {
            group: group.into(),
            max_err: self.max,
            tol,
            checked: self.n,
            pass: self.max <= tol && self.max.is_finite(),
        }
    }
}

fn central(f: impl Fn(f64) -> f64) -> f64 {
    (f(FD_STEP) - f(-FD_STEP)) / (2.0 * FD_STEP)
}

fn rand3(rng: &mut ChaCha8Rng, shape: (usize, usize, usize)) -> Array3<f64> {
    Array3::from_shape_simple_fn(shape, || rng.random_range(-1.5..1.5))
}

fn small_instance(
    rng: &mut ChaCha8Rng,
    b: usize,
    t: usize,
    c: usize,
    m: u32,
) -> Result<(RetrievalOutput, SymbolStream)> {
    let r = c / m as usize;
    let alpha = 1u16 << m;
    let mut mk = || {
        SymbolStream::new(
            Array3::from_shape_simple_fn((b, t, r), || rng.random_range(0..alpha)),
            m,
        )
    };
    let (q, k, v) = (mk()?, mk()?, mk()?);
    Ok((batch_retrieve(&q, &k, RetrievalConfig::default())?, v))
}

/// Runs the component suite and the full-model check; every group must pass.
pub fn run_suite(seed: u64) -> Result<Vec<GroupReport>> {
    let mut out = component_suite(seed)?;
    for mode in [
        FusionMode::PostAttn,
        FusionMode::PreAttn,
        FusionMode::Global,
    ] {
        out.extend(full_model_check(seed, mode)?);
    }
    Ok(out)
}

/// Head, gate, adapters and the value/query/key surrogates in isolation.
pub fn component_suite(seed: u64) -> Result<Vec<GroupReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    let (b, t, c, m) = (2, 20, 8, 2u32);
    let (out, v_syms) = small_instance(&mut rng, b, t, c, m)?;
    let read = gather_values(&out, &v_syms)?;
    let mask = out.mask();

    // Head: loss = Σ ½·inj² + w·inj.
    let w = rand3(&mut rng, (b, t, c));
    let mut p = InjectionParams::<f64>::zero_init(c);
    p.e0 = Array1::from_shape_simple_fn(c, || rng.random_range(-1.0..1.0));
    p.e1 = Array1::from_shape_simple_fn(c, || rng.random_range(-1.0..1.0));
    p.w_out = Array2::from_shape_simple_fn((c, c), || rng.random_range(-1.0..1.0));
    let head_loss = |p: &InjectionParams<f64>| -> f64 {
        let f = inject_forward(&read, &mask, m, p).expect("validated shapes");
        (&f.inj * &f.inj * 0.5 + &f.inj * &w).sum()
    };
    let fwd = inject_forward(&read, &mask, m, &p)?;
    let g = backprop_head(&(&fwd.inj + &w), &fwd, &p)?;
    let (mut e0, mut e1, mut wo) = (Acc::default(), Acc::default(), Acc::default());
    for ch in 0..c {
        e0.rel(
            g.g_e0[ch],
            central(|h| {
                let mut q = p.clone();
                q.e0[ch] += h;
                head_loss(&q)
            }),
        );
        e1.rel(
            g.g_e1[ch],
            central(|h| {
                let mut q = p.clone();
                q.e1[ch] += h;
                head_loss(&q)
            }),
        );
        for k in 0..c {
            wo.rel(
                g.g_w_out[[ch, k]],
                central(|h| {
                    let mut q = p.clone();
                    q.w_out[[ch, k]] += h;
                    head_loss(&q)
                }),
            );
        }
    }
    reports.push(e0.report("inj.e0", COMPONENT_TOL));
    reports.push(e1.report("inj.e1", COMPONENT_TOL));
    reports.push(wo.report("inj.w_out", COMPONENT_TOL));

    // Gate.
    let (h, inj, gm) = (
        rand3(&mut rng, (b, 4, c)),
        rand3(&mut rng, (b, 4, c)),
        rand3(&mut rng, (b, 4, c)),
    );
    let alpha = Array1::from_shape_simple_fn(c, || rng.random_range(-2.0..2.0));
    let gg = backprop_gate(&gm, &h, &inj, &alpha, GateMode::PreAttn)?;
    let mut ga = Acc::default();
    for ch in 0..c {
        let fd = central(|d| {
            let mut a = alpha.clone();
            a[ch] += d;
            (mix_pre_attn(&h, &inj, &a).expect("same shapes") * &gm).sum()
        });
        ga.rel(gg.g_alpha0[ch], fd);
    }
    reports.push(ga.report("gate.alpha0", COMPONENT_TOL));

    // Adapters, with a learned LN scale.
    let (ab, at, ac) = (2, 5, 6);
    let hh = rand3(&mut rng, (ab, at, ac));
    let mut ap = AdapterParams::<f64>::random(ac, &mut rng);
    ap.ln_scale = Some(Array1::from_shape_simple_fn(ac, || {
        rng.random_range(0.5..1.5)
    }));
    let (wq, wk, wv) = (
        rand3(&mut rng, (ab, at, ac)),
        rand3(&mut rng, (ab, at, ac)),
        rand3(&mut rng, (ab, at, ac)),
    );
    let ad_loss = |h: &Array3<f64>, p: &AdapterParams<f64>| -> f64 {
        let pr = project_and_binarize(h, p).expect("validated shapes");
        (&pr.q_vec * &wq).sum() + (&pr.k_vec * &wk).sum() + (&pr.v_vec * &wv).sum()
    };
    let proj = project_and_binarize(&hh, &ap)?;
    let ag = backprop_adapters(&wq, &wk, &wv, &proj, &ap)?;
    let mut acc = Acc::default();
    for i in 0..ac {
        for j in 0..ac {
            for which in 0..3 {
                let a = [ag.g_w_q[[i, j]], ag.g_w_k[[i, j]], ag.g_w_v[[i, j]]][which];
                acc.rel(
                    a,
                    central(|d| {
                        let mut q = ap.clone();
                        [&mut q.w_q, &mut q.w_k, &mut q.w_v][which][[i, j]] += d;
                        ad_loss(&hh, &q)
                    }),
                );
            }
        }
        let a = ag.g_ln_scale.as_ref().expect("scale present")[i];
        acc.rel(
            a,
            central(|d| {
                let mut q = ap.clone();
                q.ln_scale.as_mut().expect("scale present")[i] += d;
                ad_loss(&hh, &q)
            }),
        );
    }
    for ((x, y, z), &a) in ag.g_h.indexed_iter() {
        acc.rel(
            a,
            central(|d| {
                let mut hp = hh.clone();
                hp[[x, y, z]] += d;
                ad_loss(&hp, &ap)
            }),
        );
    }
    reports.push(acc.report("adapters", COMPONENT_TOL));

    // Value surrogate Σ θ·σ(V[τ]) with τ frozen.
    let theta = Theta(rand3(&mut rng, (b, t, c)));
    let v = rand3(&mut rng, (b, t, c));
    let surrogate = |v: &Array3<f64>| -> f64 {
        let mut s = 0.0;
        for ((bb, tt, r), &tau) in out.tau.indexed_iter() {
            if tau >= 0 {
                for j in 0..m as usize {
                    let ch = r * m as usize + j;
                    s += theta.0[[bb, tt, ch]] * v[[bb, tau as usize, ch]].sigmoid();
                }
            }
        }
        s
    };
    let gv = backward_value(&theta, &out, &v)?;
    let mut acc = Acc::default();
    for ((x, y, z), &a) in gv.indexed_iter() {
        acc.rel(
            a,
            central(|d| {
                let mut vp = v.clone();
                vp[[x, y, z]] += d;
                surrogate(&vp)
            }),
        );
    }
    reports.push(acc.report("surrogate.v", COMPONENT_TOL));

    // Query and key surrogates against literal loops.
    let (mut aq, mut ak) = (Acc::default(), Acc::default());
    for i in 0..20u64 {
        let mm = rng.random_range(1..=4u32);
        let c = mm as usize * rng.random_range(1..=3usize);
        let (b, t) = (rng.random_range(1..=2), rng.random_range(2..=48));
        let (out, _) = small_instance(&mut rng, b, t, c, mm)?;
        let theta = Theta(rand3(&mut rng, (b, t, c)));
        let (v, q, k) = (
            rand3(&mut rng, (b, t, c)),
            rand3(&mut rng, (b, t, c)),
            rand3(&mut rng, (b, t, c)),
        );
        let scale = 1.0 - 0.02 * i as f64;
        let (_, dq, dk) = dense_surrogate_grads(&theta.0, &out, &v, &q, &k, scale);
        aq.abs(&backward_query(&theta, &out, &v, &q)?, &dq);
        ak.abs(&backward_key(&theta, &out, &v, &k, scale)?, &dk);
    }
    reports.push(aq.report("surrogate.q", DENSE_TOL));
    reports.push(ak.report("surrogate.k", DENSE_TOL));
    Ok(reports)
}

/// Small decoder used by the full-model check.
pub fn check_model(seed: u64, mode: FusionMode) -> Result<(Model<f64>, Batch)> {
    let mut cfg = ModelConfig::new(13, 16, mode);
    cfg.window = 5;
    cfg.route_bits = 2;
    cfg.seed = seed;
    let mut model = Model::<f64>::new(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for b in &mut model.params.blocks {
        b.inj.e0.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        b.inj.e1.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        b.inj.w_out.mapv_inplace(|_| rng.random_range(-0.3..0.3));
        b.inj.alpha0.mapv_inplace(|_| rng.random_range(-1.0..1.0));
    }
    let (bs, t) = (2, 24);
    // Few distinct tokens so retrieval finds matches.
    let tokens = Array2::from_shape_simple_fn((bs, t), || rng.random_range(0..4u32));
    let targets = Array2::from_shape_simple_fn((bs, t), || {
        if rng.random_bool(0.4) {
            rng.random_range(0..13)
        } else {
            -1
        }
    });
    Ok((model, Batch { tokens, targets }))
}

/// Every parameter tensor of a small model against central differences of
/// the summed loss, with retrieval frozen at the unperturbed point.
pub fn full_model_check(seed: u64, mode: FusionMode) -> Result<Vec<GroupReport>> {
    let (model, batch) = check_model(seed, mode)?;
    let base = PassOptions::default();
    let opts = if mode.uses_rosa() {
        PassOptions {
            frozen: Some(model.forward(&batch, &base)?.freeze()),
            no_surrogate: true,
        }
    } else {
        base
    };
    let (_, _, grads) = model.compute_grads(&batch, &opts)?;
    let loss = |m: &Model<f64>| -> f64 {
        let fc = m.forward(&batch, &opts).expect("validated batch");
        let targets = batch.target_positions();
        crate::model::cross_entropy(&fc.logits, &targets).0
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(17));
    let mut reports = Vec::new();
    let names: Vec<(String, Vec<f64>)> = grads
        .tensors()
        .into_iter()
        .map(|(n, g)| (n, g.iter().copied().collect()))
        .collect();
    for (ti, (name, g)) in names.iter().enumerate() {
        let picks: Vec<usize> = if g.len() <= 24 {
            (0..g.len()).collect()
        } else {
            (0..24).map(|_| rng.random_range(0..g.len())).collect()
        };
        let mut acc = Acc::default();
        for idx in picks {
            let fd = central(|d| {
                let mut m = model.clone();
                let mut ts = m.params.tensors_mut();
                let slot = ts[ti].1.iter_mut().nth(idx).expect("index in range");
                *slot += d;
                drop(ts);
                loss(&m)
            });
            acc.rel(g[idx], fd);
        }
        reports.push(acc.report(format!("{}:{name}", mode.as_str()), MODEL_TOL));
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn component_groups_pass() {
        for r in component_suite(1).unwrap() {
            assert!(r.pass, "{r:?}");
            assert!(r.checked > 0);
        }
    }

    #[test]
    fn full_model_groups_pass() {
        for mode in [
            FusionMode::PostAttn,
            FusionMode::PreAttn,
            FusionMode::WindowOnly,
        ] {
            let reports = full_model_check(2, mode).unwrap();
            assert!(reports.iter().any(|r| r.group.ends_with("attn.w_q")));
            for r in reports {
                assert!(r.pass, "{r:?}");
            }
        }
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        let mut acc = Acc::default();
        acc.rel(1.0, 1.01);
        assert!(!acc.report("x", COMPONENT_TOL).pass);
    }
}
