//! Built-in consistency checks: brute-force oracles, invariants and
//! finite-difference gradient checks, all in double precision.

use cascade_tensor::gradcheck::{numeric_gradient, relative_error};
use cascade_tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{LossConfig, RobustMode};
use crate::correlation::{build_cost_volume, build_pyramid, cost_volume_var, lookup, lookup_channels, lookup_var, pyramid_vars};
use crate::loss::{self, ExponentLaw, Target};
use crate::types::{FlowField, ValidMask};
use crate::update::{convex_upsample, convex_upsample_var, ConvexMask, MASK_CHANNELS};

pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const ORACLE_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct Options {
    pub seed: u64,
    /// Exponent law fed to the loss schedule under test.
    pub exponent: ExponentLaw,
}

impl Default for Options {
    fn default() -> Self {
        Self { seed: 17, exponent: loss::standard_exponent }
    }
}

#[derive(Clone, Debug)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type Outcome = std::result::Result<String, String>;

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn within(name: &str, got: f64, want: f64, tol: f64) -> std::result::Result<(), String> {
    if (got - want).abs() <= tol {
        Ok(())
    } else {
        Err(format!("{name}: got {got:.12}, expected {want:.12} (tolerance {tol:e})"))
    }
}

/// Runs every check and returns one entry per check.
pub fn run(opts: &Options) -> Vec<Check> {
    let checks: Vec<(&'static str, Box<dyn Fn(&Options) -> Outcome>)> = vec![
        ("weight_ratio_law", Box::new(weight_ratio_law)),
        ("loss_examples", Box::new(|_: &Options| loss_examples())),
        ("metric_examples", Box::new(|_: &Options| metric_examples())),
        ("cost_volume_oracle", Box::new(cost_volume_oracle)),
        ("cost_volume_symmetry", Box::new(cost_volume_symmetry)),
        ("pyramid_oracle", Box::new(pyramid_oracle)),
        ("lookup_oracle", Box::new(lookup_oracle)),
        ("mask_normalisation", Box::new(mask_normalisation)),
        ("constant_upsampling", Box::new(|_: &Options| constant_upsampling())),
        ("grad_lookup_flow", Box::new(grad_lookup_flow)),
        ("grad_convex_upsample", Box::new(grad_convex_upsample)),
        ("grad_total_loss_pretrain", Box::new(|o: &Options| grad_total_loss(o, RobustMode::Pretrain))),
        ("grad_total_loss_finetune", Box::new(|o: &Options| grad_total_loss(o, RobustMode::Finetune))),
    ];
    checks
        .into_iter()
        .map(|(name, f)| match f(opts) {
            Ok(detail) => Check { name, passed: true, detail },
            Err(detail) => Check { name, passed: false, detail },
        })
        .collect()
}

/// One `PASS`/`FAIL` line per check.
pub fn report(checks: &[Check]) -> String {
    checks
        .iter()
        .map(|c| format!("{} {:<26} {}\n", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail))
        .collect()
}

fn weight_ratio_law(opts: &Options) -> Outcome {
    let gamma = 0.8;
    let sched = loss::schedule_weights_with(gamma, &[4, 6, 8], opts.exponent).map_err(|e| e.to_string())?;
    let w = sched.flat();
    if w.len() != 18 {
        return Err(format!("expected 18 weights, got {}", w.len()));
    }
    if w[17] != 1.0 {
        return Err(format!("final weight {} is not 1", w[17]));
    }
    for (k, pair) in w.windows(2).enumerate() {
        let ratio = pair[1] / pair[0];
        if (ratio - 1.0 / gamma).abs() > 1e-12 {
            return Err(format!("weights {k}->{}: ratio {ratio} instead of {} (gamma {gamma}, iters 4,6,8)", k + 1, 1.0 / gamma));
        }
    }
    within("weight(0, 0)", sched.weight(0, 0), gamma.powi(17), 1e-12)?;
    Ok(format!("18 weights, ratio {} throughout", 1.0 / gamma))
}

fn loss_examples() -> Outcome {
    let eps = 1e-5;
    let pred = FlowField::from_fn(1, 2, |_, x| if x == 0 { (3.0, 4.0) } else { (0.0, 0.0) });
    let gt = FlowField::zeros(1, 2);
    let v = loss::per_iteration_loss(std::slice::from_ref(&pred), std::slice::from_ref(&gt), None, eps).map_err(|e| e.to_string())?;
    within("two-pixel loss", v, ((25.0f64 + eps).sqrt() + eps.sqrt()) / 2.0, 1e-12)?;
    within("two-pixel loss (rounded)", v, 2.50158, 1e-5)?;
    let mut mask = ValidMask::all(1, 2);
    mask.data[0] = false;
    let masked = loss::per_iteration_loss(&[pred], std::slice::from_ref(&gt), Some(&[mask]), eps).map_err(|e| e.to_string())?;
    within("masked loss", masked, eps.sqrt(), 1e-12)?;
    let sched = loss::schedule_weights(0.8, &[1]).map_err(|e| e.to_string())?;
    let cfg = LossConfig { robust_mode: RobustMode::Finetune, ..LossConfig::default() };
    let ft = loss::total_loss(&[vec![gt.clone()]], &[gt], None, &sched, &cfg).map_err(|e| e.to_string())?;
    within("finetune zero error", ft, (eps.sqrt() + 0.01f64).powf(0.7), 1e-12)?;
    Ok(format!("two-pixel {v:.6}, finetune {ft:.7}"))
}

fn metric_examples() -> Outcome {
    let pred = FlowField::constant(1, 1, 3.0, 4.0);
    let zero = FlowField::zeros(1, 1);
    let e = loss::epe(&pred, &zero, None).map_err(|e| e.to_string())?;
    if e != 5.0 {
        return Err(format!("epe((3,4), (0,0)) = {e}"));
    }
    let cases = [((100.0f32, 4.0f32), 0.0), ((10.0, 4.0), 100.0)];
    for ((mag, err), want) in cases {
        let gt = FlowField::constant(1, 1, mag, 0.0);
        let p = FlowField::constant(1, 1, mag + err, 0.0);
        let fl = loss::fl_rate(&p, &gt, None).map_err(|e| e.to_string())?;
        if fl != want {
            return Err(format!("fl_rate with error {err} and magnitude {mag}: {fl}, expected {want}"));
        }
    }
    Ok("epe 5, fl rule cases 0% and 100%".into())
}

pub fn brute_cost_volume(f1: &Tensor<f64>, f2: &Tensor<f64>) -> Tensor<f64> {
    let (n, d, h, w) = f1.dims4();
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = Tensor::zeros(&[n, h, w, h, w]);
    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                for k in 0..h {
                    for l in 0..w {
                        let dot: f64 = (0..d).map(|c| f1.at4(b, c, i, j) * f2.at4(b, c, k, l)).sum();
                        out.data_mut()[(((b * h + i) * w + j) * h + k) * w + l] = dot * scale;
                    }
                }
            }
        }
    }
    out
}

pub fn brute_pool(v: &Tensor<f64>) -> Tensor<f64> {
    let s = v.shape();
    let (n, h, w, hl, wl) = (s[0], s[1], s[2], s[3], s[4]);
    let (ho, wo) = (hl / 2, wl / 2);
    let mut out = Tensor::zeros(&[n, h, w, ho, wo]);
    for p in 0..n * h * w {
        for y in 0..ho {
            for x in 0..wo {
                let at = |dy: usize, dx: usize| v.data()[(p * hl + 2 * y + dy) * wl + 2 * x + dx];
                out.data_mut()[(p * ho + y) * wo + x] = (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)) / 4.0;
            }
        }
    }
    out
}

/// Bilinear read of plane `(n, i, j)` of a volume at `(y, x)`, zero outside.
fn brute_sample(v: &Tensor<f64>, n: usize, i: usize, j: usize, y: f64, x: f64) -> f64 {
    let s = v.shape();
    let (h, w, hl, wl) = (s[1], s[2], s[3], s[4]);
    let base = ((n * h + i) * w + j) * hl * wl;
    let (y0, x0) = (y.floor(), x.floor());
    let mut acc = 0.0;
    for (yy, wy) in [(y0, 1.0 - (y - y0)), (y0 + 1.0, y - y0)] {
        for (xx, wx) in [(x0, 1.0 - (x - x0)), (x0 + 1.0, x - x0)] {
            if yy >= 0.0 && xx >= 0.0 && (yy as usize) < hl && (xx as usize) < wl {
                acc += wy * wx * v.data()[base + yy as usize * wl + xx as usize];
            }
        }
    }
    acc
}

pub fn brute_lookup(levels: &[Tensor<f64>], flow: &Tensor<f64>, radius: usize) -> Tensor<f64> {
    let (n, _, h, w) = flow.dims4();
    let k = 2 * radius + 1;
    let mut out = Tensor::zeros(&[n, levels.len() * k * k, h, w]);
    for (l, vol) in levels.iter().enumerate() {
        let scale = (1u64 << l) as f64;
        for b in 0..n {
            for i in 0..h {
                for j in 0..w {
                    let cx = (j as f64 + flow.at4(b, 0, i, j)) / scale;
                    let cy = (i as f64 + flow.at4(b, 1, i, j)) / scale;
                    for dy in 0..k {
                        for dx in 0..k {
                            let y = cy + dy as f64 - radius as f64;
                            let x = cx + dx as f64 - radius as f64;
                            let ch = l * k * k + dy * k + dx;
                            out.data_mut()[((b * levels.len() * k * k + ch) * h + i) * w + j] = brute_sample(vol, b, i, j, y, x);
                        }
                    }
                }
            }
        }
    }
    out
}

fn cost_volume_oracle(opts: &Options) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let (f1, f2) = (uniform(&[2, 4, 8, 8], &mut rng), uniform(&[2, 4, 8, 8], &mut rng));
    let fast = build_cost_volume(&f1, &f2).map_err(|e| e.to_string())?;
    let err = max_abs_diff(&fast, &brute_cost_volume(&f1, &f2));
    if err > ORACLE_TOLERANCE {
        return Err(format!("cost volume deviates by {err:e} on random 8x8, D=4 features (seed {})", opts.seed));
    }
    Ok(format!("max deviation {err:.1e}"))
}

fn cost_volume_symmetry(opts: &Options) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed + 1);
    let (f1, f2) = (uniform(&[1, 4, 6, 5], &mut rng), uniform(&[1, 4, 6, 5], &mut rng));
    let a = build_cost_volume(&f1, &f2).map_err(|e| e.to_string())?;
    let b = build_cost_volume(&f2, &f1).map_err(|e| e.to_string())?;
    let (h, w) = (6, 5);
    let idx = |i: usize, j: usize, k: usize, l: usize| ((i * w + j) * h + k) * w + l;
    for i in 0..h {
        for j in 0..w {
            for k in 0..h {
                for l in 0..w {
                    let (x, y) = (a.data()[idx(i, j, k, l)], b.data()[idx(k, l, i, j)]);
                    if (x - y).abs() > 1e-12 {
                        return Err(format!("C(f1,f2)[{i},{j},{k},{l}] = {x} but C(f2,f1)[{k},{l},{i},{j}] = {y}"));
                    }
                }
            }
        }
    }
    Ok("swap of feature maps transposes the volume".into())
}

fn pyramid_oracle(opts: &Options) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed + 2);
    let vol = uniform(&[1, 8, 8, 8, 8], &mut rng);
    let pyr = build_pyramid(vol.clone(), 3).map_err(|e| e.to_string())?;
    let mut want = vol;
    let mut worst: f64 = 0.0;
    for l in 1..3 {
        want = brute_pool(&want);
        worst = worst.max(max_abs_diff(&pyr.levels[l], &want));
    }
    if worst > ORACLE_TOLERANCE {
        return Err(format!("pooled levels deviate by {worst:e}"));
    }
    let constant = build_pyramid(Tensor::full(&[1, 2, 2, 4, 4], 0.75), 3).map_err(|e| e.to_string())?;
    if constant.levels.iter().any(|v| v.data().iter().any(|&x| x != 0.75)) {
        return Err("a constant volume changed value under pooling".into());
    }
    Ok(format!("max deviation {worst:.1e}"))
}

fn lookup_oracle(opts: &Options) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed + 3);
    let (f1, f2) = (uniform(&[1, 4, 8, 8], &mut rng), uniform(&[1, 4, 8, 8], &mut rng));
    let pyr = build_pyramid(build_cost_volume(&f1, &f2).map_err(|e| e.to_string())?, 2).map_err(|e| e.to_string())?;
    let flow = Tensor::from_fn(&[1, 2, 8, 8], |_| rng.random_range(-3.0..3.0));
    let fast = lookup(&pyr, &flow, 2).map_err(|e| e.to_string())?;
    let err = max_abs_diff(&fast, &brute_lookup(&pyr.levels, &flow, 2));
    if err > ORACLE_TOLERANCE {
        return Err(format!("lookup deviates by {err:e} (radius 2, 2 levels, seed {})", opts.seed));
    }
    Ok(format!("max deviation {err:.1e}"))
}

fn mask_normalisation(opts: &Options) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed + 4);
    let logits = Tensor::from_fn(&[2, MASK_CHANNELS, 3, 5], |_| rng.random_range(-20.0..20.0));
    let mask = ConvexMask::from_logits(&logits).map_err(|e| e.to_string())?;
    if !mask.is_valid(1e-6) {
        return Err("softmax weights are negative or do not sum to one".into());
    }
    Ok("rows sum to one within 1e-6".into())
}

fn constant_upsampling() -> Outcome {
    let mut flow = Tensor::zeros(&[1, 2, 3, 4]);
    for (i, v) in flow.data_mut().iter_mut().enumerate() {
        *v = if i < 12 { 1.5 } else { -2.0 };
    }
    let logits = Tensor::from_fn(&[1, MASK_CHANNELS, 3, 4], |i| ((i * 37) % 11) as f64 - 5.0);
    let up = convex_upsample(&flow, &ConvexMask::from_logits(&logits).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let plane = 6 * 8;
    let worst = up.data()[..plane]
        .iter()
        .map(|&u| (u - 3.0).abs())
        .chain(up.data()[plane..].iter().map(|&v| (v + 4.0).abs()))
        .fold(0.0, f64::max);
    if worst > 1e-12 {
        return Err(format!("constant (1.5, -2.0) maps off (3, -4) by {worst:e}"));
    }
    Ok("(1.5, -2.0) -> (3.0, -4.0)".into())
}

/// Relative error between the graph gradient of `f` at `x` and central differences.
fn compare(mut f: impl FnMut(&mut Graph<f64>, Var) -> Var, x: &Tensor<f64>) -> f64 {
    let mut g = Graph::new();
    let leaf = g.leaf(x.clone());
    let out = f(&mut g, leaf);
    let analytic = g.backward(out).take(leaf).unwrap_or_else(|| Tensor::zeros(x.shape()));
    let numeric = numeric_gradient(
        |t| {
            let mut g = Graph::new();
            let c = g.constant(t.clone());
            let out = f(&mut g, c);
            g.value(out).data()[0]
        },
        x,
        1e-6,
    );
    relative_error(&analytic, &numeric)
}

fn graded(name: &str, err: f64) -> std::result::Result<(), String> {
    if err < GRAD_TOLERANCE {
        Ok(())
    } else {
        Err(format!("{name}: relative error {err:e} exceeds {GRAD_TOLERANCE:e}"))
    }
}

fn grad_lookup_flow(opts: &Options) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed + 5);
    let (f1, f2) = (uniform(&[1, 3, 4, 4], &mut rng), uniform(&[1, 3, 4, 4], &mut rng));
    // fractional offsets keep every sample point off the lattice of both levels
    let flow = Tensor::from_fn(&[1, 2, 4, 4], |_| rng.random_range(-1.5..1.5f64).trunc() + rng.random_range(0.1..0.4));
    let weights = uniform(&[1, lookup_channels(2, 1), 4, 4], &mut rng);
    let err = compare(
        |g, fl| {
            let (a, b) = (g.constant(f1.clone()), g.constant(f2.clone()));
            let vol = cost_volume_var(g, a, b).unwrap();
            let levels = pyramid_vars(g, vol, 2).unwrap();
            let out = lookup_var(g, &levels, fl, 1, lookup_channels(2, 1)).unwrap();
            let r = g.constant(weights.clone());
            let p = g.mul(out, r);
            g.sum(p)
        },
        &flow,
    );
    graded("lookup w.r.t. flow", err)?;
    Ok(format!("relative error {err:.1e}"))
}

fn grad_convex_upsample(opts: &Options) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed + 6);
    let flow = uniform(&[1, 2, 4, 4], &mut rng);
    let logits = uniform(&[1, MASK_CHANNELS, 4, 4], &mut rng).map(|x| 2.0 * x);
    let weights = uniform(&[1, 2, 8, 8], &mut rng);
    let contract = |g: &mut Graph<f64>, up: Var| {
        let r = g.constant(weights.clone());
        let p = g.mul(up, r);
        g.sum(p)
    };
    let e_flow = compare(
        |g, f| {
            let l = g.constant(logits.clone());
            let up = convex_upsample_var(g, f, l).unwrap();
            contract(g, up)
        },
        &flow,
    );
    graded("convex upsampling w.r.t. flow", e_flow)?;
    let e_mask = compare(
        |g, l| {
            let f = g.constant(flow.clone());
            let up = convex_upsample_var(g, f, l).unwrap();
            contract(g, up)
        },
        &logits,
    );
    graded("convex upsampling w.r.t. mask logits", e_mask)?;
    Ok(format!("relative errors {e_flow:.1e} (flow), {e_mask:.1e} (logits)"))
}

fn grad_total_loss(opts: &Options, mode: RobustMode) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed + 7);
    let gt: Vec<FlowField> = (0..2).map(|_| FlowField::from_fn(4, 4, |_, _| (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)))).collect();
    let mut valid = vec![ValidMask::all(4, 4), ValidMask::all(4, 4)];
    valid[1].data[5] = false;
    valid[1].data[10] = false;
    let target = Target::<f64>::new(&gt, Some(&valid)).map_err(|e| e.to_string())?;
    let sched = loss::schedule_weights(0.8, &[1, 2]).map_err(|e| e.to_string())?;
    let cfg = LossConfig { robust_mode: mode, ..LossConfig::default() };
    // f32-representable predictions so the plain f64 route sees identical inputs
    let preds: Vec<Tensor<f64>> =
        (0..3).map(|_| Tensor::from_fn(&[2, 2, 4, 4], |_| rng.random_range(-2.0f32..2.0) as f64)).collect();
    let mut worst: f64 = 0.0;
    for k in 0..preds.len() {
        let err = compare(
            |g, p| {
                let vars: Vec<Var> = (0..preds.len()).map(|j| if j == k { p } else { g.constant(preds[j].clone()) }).collect();
                loss::total_loss_var(g, &vars, &target, &sched, &cfg).unwrap()
            },
            &preds[k],
        );
        worst = worst.max(err);
    }
    graded(&format!("total loss ({}) w.r.t. predictions", mode.as_str()), worst)?;
    let mut g = Graph::new();
    let vars: Vec<Var> = preds.iter().map(|p| g.constant(p.clone())).collect();
    let lv = loss::total_loss_var(&mut g, &vars, &target, &sched, &cfg).map_err(|e| e.to_string())?;
    let graph_value = g.value(lv).data()[0];
    let fields: Vec<Vec<FlowField>> = preds
        .iter()
        .map(|p| (0..2).map(|n| FlowField::from_tensor(p, n)).collect::<crate::Result<Vec<_>>>())
        .collect::<crate::Result<_>>()
        .map_err(|e| e.to_string())?;
    let plain = loss::total_loss(&fields, &gt, Some(&valid), &sched, &cfg).map_err(|e| e.to_string())?;
    within("graph vs plain total loss", graph_value, plain, 1e-10)?;
    Ok(format!("relative error {worst:.1e}, value {plain:.6}"))
}
