//! Test oracles: a plain-arithmetic re-implementation of the codec forward
//! pass and central finite differences over it.
#![allow(dead_code, clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

use frae::autodiff::{Tape, Tensor, Var};
use frae::nn::{Activation, Bound, GruCell, Linear, ModelParams};
use frae::prior::{PriorKind, PriorModel};
use frae::schemes::{Architecture, CodecState, Model, SchemeId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

type Mat = Vec<Vec<f64>>;

fn p<'a>(params: &'a ModelParams, name: &str) -> (&'a [f64], usize) {
    let t = params.get(name).unwrap_or_else(|_| panic!("missing {name}"));
    (t.data(), *t.shape().last().unwrap())
}

fn affine(params: &ModelParams, name: &str, x: &Mat) -> Mat {
    let (w, out) = p(params, &format!("{name}.w"));
    let (b, _) = p(params, &format!("{name}.b"));
    x.iter()
        .map(|row| {
            (0..out)
                .map(|j| b[j] + row.iter().enumerate().map(|(i, v)| v * w[i * out + j]).sum::<f64>())
                .collect()
        })
        .collect()
}

fn tanh_m(x: Mat) -> Mat {
    x.into_iter().map(|r| r.into_iter().map(f64::tanh).collect()).collect()
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn gru(params: &ModelParams, name: &str, x: &Mat, h: &Mat) -> Mat {
    let (wx, g3) = p(params, &format!("{name}.wx"));
    let (bx, _) = p(params, &format!("{name}.bx"));
    let (wh, _) = p(params, &format!("{name}.wh"));
    let (bh, _) = p(params, &format!("{name}.bh"));
    let hd = g3 / 3;
    x.iter()
        .zip(h)
        .map(|(xr, hr)| {
            let gx: Vec<f64> = (0..g3)
                .map(|j| bx[j] + xr.iter().enumerate().map(|(i, v)| v * wx[i * g3 + j]).sum::<f64>())
                .collect();
            let gh: Vec<f64> = (0..g3)
                .map(|j| bh[j] + hr.iter().enumerate().map(|(i, v)| v * wh[i * g3 + j]).sum::<f64>())
                .collect();
            (0..hd)
                .map(|j| {
                    let r = sigmoid(gx[j] + gh[j]);
                    let z = sigmoid(gx[hd + j] + gh[hd + j]);
                    let n = (gx[2 * hd + j] + r * gh[2 * hd + j]).tanh();
                    (1.0 - z) * n + z * hr[j]
                })
                .collect()
        })
        .collect()
}

fn concat(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().chain(y).copied().collect()).collect()
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

fn softmax(row: &[f64]) -> Vec<f64> {
    log_softmax(row).into_iter().map(f64::exp).collect()
}

/// Quantizer decisions and soft assignments of the unperturbed pass. With
/// them fixed, the straight-through quantizer becomes the smooth map
/// `y ↦ c[idx] + (y − y₀)` and the rate assignment `hard + soft − soft₀`,
/// whose ordinary derivatives are what the tape must reproduce.
#[derive(Debug, Clone, Default)]
pub struct Frozen {
    pub indices: Vec<Vec<usize>>,
    pub y0: Vec<Vec<f64>>,
    pub soft0: Vec<Vec<f64>>,
}

pub struct LossSpec<'a> {
    pub arch: Architecture,
    /// `T` frames, each `B` rows of `F` values.
    pub frames: &'a [Mat],
    pub weights: &'a [f64],
    pub beta: f64,
    pub tau: f64,
}

fn nearest(v: f64, entries: &[f64]) -> usize {
    let mut best = 0;
    for k in 1..entries.len() {
        if (v - entries[k]).abs() < (v - entries[best]).abs() {
            best = k;
        }
    }
    best
}

/// `(Σ_t d_t + β·Σ_t rate_t / B) / T`, computed without the tape. With
/// `frozen = None` it records the quantizer decisions it makes.
pub fn oracle_loss(params: &ModelParams, s: &LossSpec, frozen: Option<&Frozen>) -> (f64, Frozen) {
    let a = s.arch;
    let (d, k) = (a.latent_dim, a.levels);
    let b = s.frames[0].len();
    let zeros = |w: usize| vec![vec![0.0; w]; b];
    let mut enc = zeros(a.enc_hidden);
    let mut dec = zeros(a.dec_hidden);
    let mut prev_lat = zeros(d);
    let mut prev_out = zeros(a.frame_dim);
    let (cb, _) = p(params, "codebook");
    let mut rec = Frozen::default();
    let (mut dist, mut rate) = (0.0, 0.0);
    for (t, x) in s.frames.iter().enumerate() {
        let logits: Mat = match a.prior {
            PriorKind::Uniform => vec![vec![0.0; k]; b * d],
            PriorKind::TimeInvariant => {
                let (tab, _) = p(params, "prior.logits");
                (0..b * d).map(|n| tab[(n % d) * k..(n % d + 1) * k].to_vec()).collect()
            }
            kind => {
                let cond = if kind == PriorKind::CondDecoderState { &dec } else { &prev_lat };
                let flat = affine(params, "prior.fc2", &tanh_m(affine(params, "prior.fc1", cond)));
                flat.iter().flat_map(|r| r.chunks(k).map(<[f64]>::to_vec)).collect()
            }
        };
        let input = match a.scheme {
            SchemeId::LatentFeedback => concat(x, &prev_lat),
            SchemeId::OutputFeedback => concat(x, &prev_out),
            SchemeId::Frae => concat(x, &dec),
            _ => x.clone(),
        };
        let mut hid = tanh_m(affine(params, "enc.fc_in", &input));
        if a.scheme.has_encoder_state() {
            hid = gru(params, "enc.gru", &hid, &enc);
            enc = hid.clone();
        }
        let y = affine(params, "enc.fc_out", &hid);
        let yflat: Vec<f64> = y.concat();
        let idx: Vec<usize> = match frozen {
            Some(f) => f.indices[t].clone(),
            None => (0..b * d).map(|n| nearest(yflat[n], &cb[(n % d) * k..(n % d + 1) * k])).collect(),
        };
        let y0 = frozen.map_or(yflat.clone(), |f| f.y0[t].clone());
        let yq: Mat = (0..b)
            .map(|r| {
                (0..d)
                    .map(|j| cb[j * k + idx[r * d + j]] + yflat[r * d + j] - y0[r * d + j])
                    .collect()
            })
            .collect();
        let soft: Vec<f64> = (0..b * d)
            .flat_map(|n| {
                let logits: Vec<f64> = (0..k).map(|e| -(yflat[n] - cb[(n % d) * k + e]).powi(2) / s.tau).collect();
                softmax(&logits)
            })
            .collect();
        let soft0 = frozen.map_or(soft.clone(), |f| f.soft0[t].clone());
        if a.prior != PriorKind::Uniform {
            for n in 0..b * d {
                let lp = log_softmax(&logits[n]);
                for e in 0..k {
                    let hard = if idx[n] == e { 1.0 } else { 0.0 };
                    let assign = hard + soft[n * k + e] - soft0[n * k + e];
                    rate -= assign * lp[e];
                }
            }
        } else {
            rate += (b * d) as f64 * (k as f64).ln();
        }
        let u = tanh_m(affine(params, "dec.fc_in", &yq));
        let h = gru(
            params,
            "dec.gru",
            &u,
            &if a.scheme.has_decoder_state() {
                dec.clone()
            } else {
                zeros(a.dec_hidden)
            },
        );
        let xhat = affine(params, "dec.fc_out", &h);
        let frame_dist: f64 = xhat
            .iter()
            .zip(x)
            .map(|(p, q)| p.iter().zip(q).zip(s.weights).map(|((u, v), w)| w * (u - v).powi(2)).sum::<f64>())
            .sum::<f64>()
            / b as f64;
        dist += frame_dist;
        if a.scheme.has_decoder_state() {
            dec = h;
        }
        prev_lat = yq;
        prev_out = xhat;
        rec.indices.push(idx);
        rec.y0.push(yflat);
        rec.soft0.push(soft);
    }
    let t = s.frames.len() as f64;
    let uniform_rate = a.prior == PriorKind::Uniform;
    let rate_term = if uniform_rate { 0.0 } else { s.beta * rate / b as f64 / t };
    (dist / t + rate_term, rec)
}

/// Loss value and parameter gradients from the library's tape.
pub fn tape_loss(model: &Model, s: &LossSpec) -> (f64, ModelParams) {
    let mut params = model.params.clone();
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let b = s.frames[0].len();
    let state = CodecState::new(&s.arch, b).to_tape(&mut tape);
    let inputs: Vec<_> = s
        .frames
        .iter()
        .map(|f| tape.constant(Tensor::new(vec![b, s.arch.frame_dim], f.concat()).unwrap()))
        .collect();
    let steps = model.net.unroll(&mut tape, &bound, state, &inputs).unwrap();
    let dist = model.net.distortion(&mut tape, &steps, &inputs, s.weights).unwrap();
    let rate = model.net.rate_nats(&mut tape, &bound, &steps, s.tau).unwrap();
    let loss = frae::training::rd_loss(&mut tape, dist, rate, s.beta, s.frames.len()).unwrap();
    tape.backward(loss).unwrap();
    params.zero_grad();
    params.accumulate_grads(&tape, &bound);
    (tape.value(loss).item(), params)
}

/// Worst per-tensor relative error `‖g − ĝ‖ / max(‖g‖, ‖ĝ‖)` between
/// analytic gradients and central differences of `f`. Tensors whose
/// gradients are both below 1e-10 in norm count as exact.
pub fn fd_check(params: &ModelParams, analytic: &ModelParams, mut f: impl FnMut(&ModelParams) -> f64) -> (f64, String) {
    let mut worst = (0.0, String::new());
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let n = params.get(&name).unwrap().numel();
        let g = analytic.grad(&name).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        let mut num = vec![0.0; n];
        let mut work = params.clone();
        for i in 0..n {
            let orig = params.get(&name).unwrap().data()[i];
            work.get_mut(&name).unwrap().data_mut()[i] = orig + FD_STEP;
            let up = f(&work);
            work.get_mut(&name).unwrap().data_mut()[i] = orig - FD_STEP;
            let down = f(&work);
            work.get_mut(&name).unwrap().data_mut()[i] = orig;
            num[i] = (up - down) / (2.0 * FD_STEP);
        }
        let diff = g.iter().zip(&num).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = norm(&g).max(norm(&num));
        let rel = if scale < 1e-10 { 0.0 } else { diff / scale };
        if rel >= worst.0 {
            worst = (rel, name);
        }
    }
    worst
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Overwrites every parameter with uniform values in `[-scale, scale]`.
pub fn randomize(params: &mut ModelParams, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for n in names {
        for v in params.get_mut(&n).unwrap().data_mut() {
            *v = rng.gen_range(-scale..scale);
        }
    }
}

pub fn random_frames(t: usize, b: usize, f: usize, seed: u64) -> Vec<Mat> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..t)
        .map(|_| (0..b).map(|_| (0..f).map(|_| rng.gen_range(-1.5..1.5)).collect()).collect())
        .collect()
}

pub fn small_arch(scheme: SchemeId, prior: PriorKind) -> Architecture {
    Architecture {
        scheme,
        prior,
        frame_dim: 3,
        latent_dim: 2,
        levels: 4,
        enc_hidden: 5,
        dec_hidden: 4,
        prior_hidden: 3,
    }
}

/// Outcome of a full-loss gradient check.
pub struct LossCheck {
    pub forward_gap: f64,
    pub rel_err: f64,
    pub worst_param: String,
}

/// Gradient check of the full rate–distortion loss of a 3-step unroll.
pub fn check_loss_gradient(arch: Architecture, seed: u64, beta: f64) -> LossCheck {
    let mut model = Model::new(arch, seed).unwrap();
    randomize(&mut model.params, seed ^ 0x5eed, 0.6);
    let frames = random_frames(3, 2, arch.frame_dim, seed + 100);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 200);
    let weights: Vec<f64> = (0..arch.frame_dim).map(|_| rng.gen_range(0.2..1.0)).collect();
    let spec = LossSpec {
        arch,
        frames: &frames,
        weights: &weights,
        beta,
        tau: 0.3,
    };
    let (tape_value, grads) = tape_loss(&model, &spec);
    let (oracle_value, frozen) = oracle_loss(&model.params, &spec, None);
    let (rel_err, worst_param) = fd_check(&model.params, &grads, |p| oracle_loss(p, &spec, Some(&frozen)).0);
    LossCheck {
        forward_gap: (tape_value - oracle_value).abs() / oracle_value.abs().max(1e-12),
        rel_err,
        worst_param,
    }
}

/// Analytic gradients of `build` (which must return a scalar) against
/// central differences of the same forward pass.
pub fn check_smooth(params: &ModelParams, build: impl Fn(&mut Tape, &Bound) -> Var) -> f64 {
    let mut tape = Tape::new();
    let b = params.bind(&mut tape);
    let out = build(&mut tape, &b);
    tape.backward(out).unwrap();
    let mut grads = params.clone();
    grads.accumulate_grads(&tape, &b);
    fd_check(params, &grads, |p| {
        let mut t = Tape::new();
        let b = p.bind_frozen(&mut t);
        let v = build(&mut t, &b);
        t.value(v).item()
    })
    .0
}

/// Projects a matrix onto fixed pseudo-random weights so every output
/// element contributes to the scalar.
pub fn project(tape: &mut Tape, x: Var) -> Var {
    let shape = tape.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect()).unwrap();
    let w = tape.constant(w);
    let m = tape.mul(x, w).unwrap();
    tape.sum(m)
}

pub fn input(tape: &mut Tape, rows: usize, cols: usize, seed: u64) -> Var {
    let f = random_frames(1, rows, cols, seed).remove(0);
    tape.constant(Tensor::new(vec![rows, cols], f.concat()).unwrap())
}

pub fn linear_err(seed: u64, act: Activation) -> f64 {
    let layer = Linear::new("fc", 4, 3, act);
    let mut params = ModelParams::new();
    layer.init(&mut params, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    randomize(&mut params, seed, 0.8);
    check_smooth(&params, |t, b| {
        let x = input(t, 2, 4, seed);
        let y = layer.forward(t, b, x).unwrap();
        project(t, y)
    })
}

pub fn gru_err(seed: u64) -> f64 {
    let cell = GruCell::new("g", 3, 4);
    let mut params = ModelParams::new();
    cell.init(&mut params, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    randomize(&mut params, seed, 0.8);
    check_smooth(&params, |t, b| {
        let x = input(t, 2, 3, seed);
        let h0 = input(t, 2, 4, seed + 50);
        let h1 = cell.step(t, b, x, h0).unwrap();
        let h2 = cell.step(t, b, x, h1).unwrap();
        project(t, h2)
    })
}

pub fn prior_err(seed: u64, kind: PriorKind) -> f64 {
    let prior = PriorModel::new(kind, 2, 4, 3, 5);
    let mut params = ModelParams::new();
    prior.init(&mut params, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    randomize(&mut params, seed, 0.8);
    check_smooth(&params, |t, b| {
        let cond = kind.is_conditional().then(|| input(t, 2, 3, seed));
        let logits = prior.logits(t, b, cond, 2).unwrap();
        let assign = input(t, 4, 4, seed + 9);
        let assign = t.softmax(assign);
        prior.rate_nats(t, logits, assign).unwrap()
    })
}

pub fn soft_assign_err(seed: u64) -> f64 {
    let mut params = ModelParams::new();
    params.insert("y", Tensor::zeros(&[2, 3])).unwrap();
    params.insert("c", Tensor::zeros(&[3, 4])).unwrap();
    randomize(&mut params, seed, 1.0);
    check_smooth(&params, |t, b| {
        let s = t.soft_assign(b.var("y").unwrap(), b.var("c").unwrap(), 0.3).unwrap();
        project(t, s)
    })
}

/// Chain of every elementwise, shape and loss op.
pub fn tensor_ops_err(seed: u64) -> f64 {
    let mut params = ModelParams::new();
    params.insert("a", Tensor::zeros(&[3, 4])).unwrap();
    params.insert("b", Tensor::zeros(&[4, 2])).unwrap();
    params.insert("t", Tensor::zeros(&[3, 2])).unwrap();
    params.insert("bias", Tensor::zeros(&[2])).unwrap();
    randomize(&mut params, seed, 1.0);
    check_smooth(&params, |t, b| {
        let v = |n: &str| b.var(n).unwrap();
        let ab = t.matmul(v("a"), v("b")).unwrap();
        let ab = t.add_bias(ab, v("bias")).unwrap();
        let s = t.sigmoid(ab);
        let e = t.exp(s);
        let l = t.log(e);
        let sm = t.log_softmax(l);
        let cat = t.concat(&[sm, v("t")]).unwrap();
        let sl = t.slice(cat, 1, 3).unwrap();
        let r = t.reshape(sl, &[2, 3]).unwrap();
        let rr = t.repeat_rows(r, 2).unwrap();
        let rr = t.reshape(rr, &[3, 4]).unwrap();
        let left = t.slice(rr, 0, 2).unwrap();
        let diff = t.sub(left, v("t")).unwrap();
        let sc = t.scale(diff, 1.7);
        t.weighted_sq_error(sc, v("t"), &[0.3, 1.1]).unwrap()
    })
}

/// With decisions fixed, the quantizer is `y ↦ c[idx] + (y − y₀)`.
pub fn quantizer_err(seed: u64) -> f64 {
    let mut params = ModelParams::new();
    params.insert("y", Tensor::zeros(&[3, 2])).unwrap();
    params.insert("c", Tensor::zeros(&[2, 4])).unwrap();
    randomize(&mut params, seed, 1.0);
    let weights = [0.5, -1.25, 2.0, 0.75, -0.3, 1.1];
    let mut tape = Tape::new();
    let b = params.bind(&mut tape);
    let (q, idx) = tape.quantize(b.var("y").unwrap(), b.var("c").unwrap()).unwrap();
    let w = tape.constant(Tensor::new(vec![3, 2], weights.to_vec()).unwrap());
    let m = tape.mul(q, w).unwrap();
    let out = tape.sum(m);
    tape.backward(out).unwrap();
    let mut grads = params.clone();
    grads.accumulate_grads(&tape, &b);
    let y0 = params.get("y").unwrap().data().to_vec();
    fd_check(&params, &grads, |p| {
        let y = p.get("y").unwrap().data();
        let c = p.get("c").unwrap().data();
        (0..6).map(|n| weights[n] * (c[(n % 2) * 4 + idx[n]] + y[n] - y0[n])).sum()
    })
    .0
}

/// Worst error of every layer check for one seed, by name.
pub fn layer_suite(seed: u64) -> Vec<(String, f64)> {
    let mut out = vec![
        ("fc-linear".to_string(), linear_err(seed, Activation::Linear)),
        ("fc-tanh".to_string(), linear_err(seed, Activation::Tanh)),
        ("gru".to_string(), gru_err(seed)),
        ("soft-assign".to_string(), soft_assign_err(seed)),
        ("tensor-ops".to_string(), tensor_ops_err(seed)),
        ("quantizer".to_string(), quantizer_err(seed)),
    ];
    for kind in [PriorKind::TimeInvariant, PriorKind::CondPrevLatent, PriorKind::CondDecoderState] {
        out.push((format!("prior-{kind}"), prior_err(seed, kind)));
    }
    out
}
