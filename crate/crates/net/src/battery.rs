//! Finite-difference verification battery over every differentiable
//! primitive and every fusion module.
//!
//! Runs in f64 with seeded inputs, so a pass is reproducible. Inputs for
//! kinked ops (relu, max-pool) are sampled away from their kinks; the
//! bilinear check runs once with an all-positive and once with an
//! all-negative pooled matrix so both signed-sqrt branches are exercised.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use uniqa_tensor::{grad_check, GradCheckReport, Tape, Tensor, TensorError, Var};

use crate::fusion;
use crate::model::{ModelConfig, UnpairedIqaModel};
use crate::params::{BottleneckParams, FebParams, FusionKind, MafeParams};

pub const TRIALS: usize = 20;
pub const EPS: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct BatteryEntry {
    pub name: String,
    pub trials: usize,
    pub max_rel_err: f64,
    pub failed_trials: usize,
}

impl BatteryEntry {
    pub fn passed(&self) -> bool {
        self.failed_trials == 0
    }
}

#[derive(Debug, Clone, Default)]
pub struct BatteryReport {
    pub entries: Vec<BatteryEntry>,
}

impl BatteryReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed())
    }

    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }
}

/// Uniform values with |v| in [0.1, 1.1]: away from the relu kink and from
/// zero norms, and generic enough to catch sign errors.
fn signed_tensor(dims: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(dims, |_| {
        let mag = rng.gen_range(0.1..1.1);
        if rng.gen_bool(0.5) {
            mag
        } else {
            -mag
        }
    })
}

fn positive_tensor(dims: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(dims, |_| rng.gen_range(0.5..1.5))
}

fn negative_tensor(dims: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(dims, |_| -rng.gen_range(0.5..1.5))
}

type CaseFn<'c> = Box<dyn Fn(&mut Tape<f64>, Var) -> Result<Var, TensorError> + 'c>;

fn run_case(
    report: &mut BatteryReport,
    name: &str,
    trials: usize,
    mut make: impl FnMut(usize, &mut ChaCha8Rng) -> (Tensor<f64>, CaseFn<'static>),
) {
    let mut entry = BatteryEntry {
        name: name.to_string(),
        trials,
        max_rel_err: 0.0,
        failed_trials: 0,
    };
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(0x9a1e_0000 + trial as u64);
        let (x, f) = make(trial, &mut rng);
        match grad_check(&f, &x, EPS, TOL) {
            Ok(r) => {
                entry.max_rel_err = entry.max_rel_err.max(r.max_rel_err);
                if !r.passed() {
                    entry.failed_trials += 1;
                }
            }
            Err(_) => entry.failed_trials += 1,
        }
    }
    report.entries.push(entry);
}

fn check_report(entry_name: &str, report: Result<GradCheckReport, TensorError>, out: &mut BatteryReport) {
    let mut entry = BatteryEntry {
        name: entry_name.to_string(),
        trials: 1,
        max_rel_err: 0.0,
        failed_trials: 0,
    };
    match report {
        Ok(r) => {
            entry.max_rel_err = r.max_rel_err;
            if !r.passed() {
                entry.failed_trials = 1;
            }
        }
        Err(_) => entry.failed_trials = 1,
    }
    out.entries.push(entry);
}

/// The full battery: tensor primitives then fusion modules, `trials`
/// randomized trials each.
pub fn run(trials: usize) -> BatteryReport {
    let mut report = BatteryReport::default();

    run_case(&mut report, "conv2d/input", trials, |t, rng| {
        let x = signed_tensor(vec![2, 5, 5], rng);
        let w = signed_tensor(vec![3, 2, 3, 3], rng);
        let b = signed_tensor(vec![3], rng);
        let pad = if t % 2 == 0 { 1 } else { 0 };
        let f: CaseFn = Box::new(move |tape, xv| {
            let wv = tape.owned(w.clone(), false);
            let bv = tape.owned(b.clone(), false);
            let y = tape.conv2d(xv, wv, bv, pad)?;
            Ok(tape.sum(y))
        });
        (x, f)
    });

    run_case(&mut report, "conv2d/weight", trials, |t, rng| {
        let x = signed_tensor(vec![2, 5, 5], rng);
        let w = signed_tensor(vec![3, 2, 3, 3], rng);
        let b = signed_tensor(vec![3], rng);
        let pad = if t % 2 == 0 { 1 } else { 0 };
        let f: CaseFn = Box::new(move |tape, wv| {
            let xv = tape.owned(x.clone(), false);
            let bv = tape.owned(b.clone(), false);
            let y = tape.conv2d(xv, wv, bv, pad)?;
            Ok(tape.sum(y))
        });
        (w, f)
    });

    run_case(&mut report, "conv2d/bias", trials, |_, rng| {
        let x = signed_tensor(vec![2, 4, 4], rng);
        let w = signed_tensor(vec![3, 2, 3, 3], rng);
        let b = signed_tensor(vec![3], rng);
        let f: CaseFn = Box::new(move |tape, bv| {
            let xv = tape.owned(x.clone(), false);
            let wv = tape.owned(w.clone(), false);
            let y = tape.conv2d(xv, wv, bv, 1)?;
            Ok(tape.sum(y))
        });
        (b, f)
    });

    run_case(&mut report, "conv2d_1x1/weight", trials, |_, rng| {
        let x = signed_tensor(vec![3, 4, 4], rng);
        let w = signed_tensor(vec![2, 3, 1, 1], rng);
        let b = signed_tensor(vec![2], rng);
        let f: CaseFn = Box::new(move |tape, wv| {
            let xv = tape.owned(x.clone(), false);
            let bv = tape.owned(b.clone(), false);
            let y = tape.conv2d(xv, wv, bv, 0)?;
            Ok(tape.sum(y))
        });
        (w, f)
    });

    run_case(&mut report, "relu", trials, |_, rng| {
        let x = signed_tensor(vec![3, 4, 4], rng);
        let f: CaseFn = Box::new(|tape, xv| {
            let y = tape.relu(xv);
            // square so the gradient is input-dependent
            let y2 = tape.mul(y, y)?;
            Ok(tape.sum(y2))
        });
        (x, f)
    });

    run_case(&mut report, "sigmoid", trials, |_, rng| {
        let x = signed_tensor(vec![2, 3, 3], rng);
        let f: CaseFn = Box::new(|tape, xv| {
            let y = tape.sigmoid(xv);
            let y2 = tape.mul(y, y)?;
            Ok(tape.sum(y2))
        });
        (x, f)
    });

    run_case(&mut report, "add", trials, |_, rng| {
        let x = signed_tensor(vec![2, 3, 3], rng);
        let other = signed_tensor(vec![2, 3, 3], rng);
        let f: CaseFn = Box::new(move |tape, xv| {
            let ov = tape.owned(other.clone(), false);
            let y = tape.add(xv, ov)?;
            let y2 = tape.mul(y, y)?;
            Ok(tape.sum(y2))
        });
        (x, f)
    });

    run_case(&mut report, "mul", trials, |_, rng| {
        let x = signed_tensor(vec![2, 3, 3], rng);
        let other = signed_tensor(vec![2, 3, 3], rng);
        let f: CaseFn = Box::new(move |tape, xv| {
            let ov = tape.owned(other.clone(), false);
            let y = tape.mul(xv, ov)?;
            Ok(tape.sum(y))
        });
        (x, f)
    });

    run_case(&mut report, "scale", trials, |t, rng| {
        let x = signed_tensor(vec![2, 3, 3], rng);
        let factor = 0.3 + t as f64 * 0.1;
        let f: CaseFn = Box::new(move |tape, xv| {
            let y = tape.affine(xv, factor, 0.25);
            let y2 = tape.mul(y, y)?;
            Ok(tape.sum(y2))
        });
        (x, f)
    });

    run_case(&mut report, "channel_mul/vector", trials, |_, rng| {
        let v = signed_tensor(vec![3], rng);
        let m = signed_tensor(vec![3, 4, 4], rng);
        let f: CaseFn = Box::new(move |tape, vv| {
            let mv = tape.owned(m.clone(), false);
            let y = tape.channel_mul(vv, mv)?;
            let y2 = tape.mul(y, y)?;
            Ok(tape.sum(y2))
        });
        (v, f)
    });

    run_case(&mut report, "channel_mul/map", trials, |_, rng| {
        let v = signed_tensor(vec![3], rng);
        let m = signed_tensor(vec![3, 4, 4], rng);
        let f: CaseFn = Box::new(move |tape, mv| {
            let vv = tape.owned(v.clone(), false);
            let y = tape.channel_mul(vv, mv)?;
            let y2 = tape.mul(y, y)?;
            Ok(tape.sum(y2))
        });
        (m, f)
    });

    run_case(&mut report, "channel_add", trials, |_, rng| {
        let v = signed_tensor(vec![3], rng);
        let m = signed_tensor(vec![3, 3, 3], rng);
        let f: CaseFn = Box::new(move |tape, vv| {
            let mv = tape.owned(m.clone(), false);
            let y = tape.channel_add(vv, mv)?;
            let y2 = tape.mul(y, y)?;
            Ok(tape.sum(y2))
        });
        (v, f)
    });

    run_case(&mut report, "concat_channels", trials, |_, rng| {
        let a = signed_tensor(vec![2, 3, 3], rng);
        let b = signed_tensor(vec![3, 3, 3], rng);
        let f: CaseFn = Box::new(move |tape, av| {
            let bv = tape.owned(b.clone(), false);
            let y = tape.concat_channels(av, bv)?;
            let y2 = tape.mul(y, y)?;
            Ok(tape.sum(y2))
        });
        (a, f)
    });

    run_case(&mut report, "slice_channels", trials, |_, rng| {
        let a = signed_tensor(vec![4, 3, 3], rng);
        let f: CaseFn = Box::new(|tape, av| {
            let y = tape.slice_channels(av, 1, 2)?;
            let y2 = tape.mul(y, y)?;
            Ok(tape.sum(y2))
        });
        (a, f)
    });

    run_case(&mut report, "global_avg_pool", trials, |_, rng| {
        let a = signed_tensor(vec![3, 4, 4], rng);
        let f: CaseFn = Box::new(|tape, av| {
            let y = tape.global_avg_pool(av)?;
            let y2 = tape.mul(y, y)?;
            Ok(tape.sum(y2))
        });
        (a, f)
    });

    run_case(&mut report, "channel_cosine/lhs", trials, |_, rng| {
        let a = signed_tensor(vec![3, 3, 3], rng);
        let b = signed_tensor(vec![3, 3, 3], rng);
        let f: CaseFn = Box::new(move |tape, av| {
            let bv = tape.owned(b.clone(), false);
            let y = tape.channel_cosine(av, bv)?;
            let y2 = tape.mul(y, y)?;
            Ok(tape.sum(y2))
        });
        (a, f)
    });

    run_case(&mut report, "channel_cosine/rhs", trials, |_, rng| {
        let a = signed_tensor(vec![3, 3, 3], rng);
        let b = signed_tensor(vec![3, 3, 3], rng);
        let f: CaseFn = Box::new(move |tape, bv| {
            let av = tape.owned(a.clone(), false);
            let y = tape.channel_cosine(av, bv)?;
            let y2 = tape.mul(y, y)?;
            Ok(tape.sum(y2))
        });
        (b, f)
    });

    run_case(&mut report, "bilinear_pool/positive", trials, |_, rng| {
        let a = positive_tensor(vec![2, 3, 3], rng);
        let b = positive_tensor(vec![3, 3, 3], rng);
        let f: CaseFn = Box::new(move |tape, av| {
            let bv = tape.owned(b.clone(), false);
            let y = tape.bilinear_pool(av, bv)?;
            let y2 = tape.mul(y, y)?;
            Ok(tape.sum(y2))
        });
        (a, f)
    });

    run_case(&mut report, "bilinear_pool/negative", trials, |_, rng| {
        let a = positive_tensor(vec![2, 3, 3], rng);
        let b = negative_tensor(vec![3, 3, 3], rng);
        let f: CaseFn = Box::new(move |tape, bv| {
            let av = tape.owned(a.clone(), false);
            let y = tape.bilinear_pool(av, bv)?;
            let y2 = tape.mul(y, y)?;
            Ok(tape.sum(y2))
        });
        (b, f)
    });

    run_case(&mut report, "max_pool2", trials, |_, rng| {
        let a = signed_tensor(vec![2, 4, 4], rng);
        let f: CaseFn = Box::new(|tape, av| {
            let y = tape.max_pool2(av)?;
            let y2 = tape.mul(y, y)?;
            Ok(tape.sum(y2))
        });
        (a, f)
    });

    run_case(&mut report, "linear/input", trials, |_, rng| {
        let x = signed_tensor(vec![6], rng);
        let w = signed_tensor(vec![4, 6], rng);
        let b = signed_tensor(vec![4], rng);
        let f: CaseFn = Box::new(move |tape, xv| {
            let wv = tape.owned(w.clone(), false);
            let bv = tape.owned(b.clone(), false);
            let y = tape.linear(xv, wv, bv)?;
            let y2 = tape.mul(y, y)?;
            Ok(tape.sum(y2))
        });
        (x, f)
    });

    run_case(&mut report, "linear/weight", trials, |_, rng| {
        let x = signed_tensor(vec![6], rng);
        let w = signed_tensor(vec![4, 6], rng);
        let b = signed_tensor(vec![4], rng);
        let f: CaseFn = Box::new(move |tape, wv| {
            let xv = tape.owned(x.clone(), false);
            let bv = tape.owned(b.clone(), false);
            let y = tape.linear(xv, wv, bv)?;
            let y2 = tape.mul(y, y)?;
            Ok(tape.sum(y2))
        });
        (w, f)
    });

    run_case(&mut report, "resize_nearest", trials, |_, rng| {
        let a = signed_tensor(vec![2, 4, 4], rng);
        let f: CaseFn = Box::new(|tape, av| {
            let y = tape.resize_nearest(av, 2, 2)?;
            let y2 = tape.mul(y, y)?;
            Ok(tape.sum(y2))
        });
        (a, f)
    });

    run_case(&mut report, "softmax_cross_entropy", trials, |t, rng| {
        let logits = signed_tensor(vec![7], rng);
        let label = t % 7;
        let f: CaseFn = Box::new(move |tape, lv| Ok(tape.softmax_cross_entropy(lv, label)?));
        (logits, f)
    });

    // ------------------------------------------------------ fusion modules

    run_case(&mut report, "feb_forward/params", trials, |t, rng| {
        let feb = FebParams::<f64>::kaiming(2, 3, rng);
        let x = positive_tensor(vec![2, 4, 4], rng);
        // alternate which conv's weight is probed
        let probe_first = t % 2 == 0;
        let probed = if probe_first {
            feb.conv1.weight.clone()
        } else {
            feb.conv2.weight.clone()
        };
        let f: CaseFn = Box::new(move |tape, wv| {
            let mut feb = feb.clone();
            if probe_first {
                feb.conv1.weight = Tensor::zeros(feb.conv1.weight.dims().to_vec());
            } else {
                feb.conv2.weight = Tensor::zeros(feb.conv2.weight.dims().to_vec());
            }
            let c1w = if probe_first { wv } else { tape.owned(feb.conv1.weight.clone(), false) };
            let c1b = tape.owned(feb.conv1.bias.clone(), false);
            let c2w = if probe_first { tape.owned(feb.conv2.weight.clone(), false) } else { wv };
            let c2b = tape.owned(feb.conv2.bias.clone(), false);
            let xv = tape.owned(x.clone(), false);
            let h = tape.conv2d(xv, c1w, c1b, 1)?;
            let h = tape.relu(h);
            let y = tape.conv2d(h, c2w, c2b, 1)?;
            let y = tape.relu(y);
            let y2 = tape.mul(y, y)?;
            Ok(tape.sum(y2))
        });
        (probed, f)
    });

    run_case(&mut report, "cosine_fusion/f_d", trials, |_, rng| {
        let f_d = signed_tensor(vec![3, 3, 3], rng);
        let f_er = signed_tensor(vec![3, 3, 3], rng);
        let f: CaseFn = Box::new(move |tape, dv| {
            let ev = tape.owned(f_er.clone(), false);
            let y = fusion::cosine_fusion(tape, dv, ev).map_err(net_to_tensor)?;
            let y2 = tape.mul(y, y)?;
            Ok(tape.sum(y2))
        });
        (f_d, f)
    });

    run_case(&mut report, "cosine_fusion/f_er", trials, |_, rng| {
        let f_d = signed_tensor(vec![3, 3, 3], rng);
        let f_er = signed_tensor(vec![3, 3, 3], rng);
        let f: CaseFn = Box::new(move |tape, ev| {
            let dv = tape.owned(f_d.clone(), false);
            let y = fusion::cosine_fusion(tape, dv, ev).map_err(net_to_tensor)?;
            let y2 = tape.mul(y, y)?;
            Ok(tape.sum(y2))
        });
        (f_er, f)
    });

    run_case(&mut report, "bottleneck_fusion/f_er", trials, |_, rng| {
        let params = BottleneckParams::<f64>::kaiming(3, rng);
        let f_d = signed_tensor(vec![3, 3, 3], rng);
        let f_er = signed_tensor(vec![3, 3, 3], rng);
        let f: CaseFn = Box::new(move |tape, ev| {
            let dv = tape.owned(f_d.clone(), false);
            let wv = tape.owned(params.fuse.weight.clone(), false);
            let bv = tape.owned(params.fuse.bias.clone(), false);
            let cat = tape.concat_channels(dv, ev)?;
            let y = tape.conv2d(cat, wv, bv, 0)?;
            let y2 = tape.mul(y, y)?;
            Ok(tape.sum(y2))
        });
        (f_er, f)
    });

    run_case(&mut report, "bottleneck_fusion/weight", trials, |_, rng| {
        let params = BottleneckParams::<f64>::kaiming(3, rng);
        let f_d = signed_tensor(vec![3, 3, 3], rng);
        let f_er = signed_tensor(vec![3, 3, 3], rng);
        let probed = params.fuse.weight.clone();
        let f: CaseFn = Box::new(move |tape, wv| {
            let dv = tape.owned(f_d.clone(), false);
            let ev = tape.owned(f_er.clone(), false);
            let bv = tape.owned(params.fuse.bias.clone(), false);
            let cat = tape.concat_channels(dv, ev)?;
            let y = tape.conv2d(cat, wv, bv, 0)?;
            let y2 = tape.mul(y, y)?;
            Ok(tape.sum(y2))
        });
        (probed, f)
    });

    for (probe, name) in [
        (MafeProbe::FD, "mafe_fusion/f_d"),
        (MafeProbe::FER, "mafe_fusion/f_er"),
        (MafeProbe::PreD, "mafe_fusion/pre_d.weight"),
        (MafeProbe::PreEr, "mafe_fusion/pre_er.weight"),
        (MafeProbe::Squeeze, "mafe_fusion/squeeze.weight"),
        (MafeProbe::SqueezeBias, "mafe_fusion/squeeze.bias"),
    ] {
        run_case(&mut report, name, trials, |_, rng| {
            let params = MafeParams::<f64>::kaiming(3, rng);
            let f_d = positive_tensor(vec![3, 3, 3], rng);
            let f_er = positive_tensor(vec![3, 3, 3], rng);
            let probed = match probe {
                MafeProbe::FD => f_d.clone(),
                MafeProbe::FER => f_er.clone(),
                MafeProbe::PreD => params.pre_d.weight.clone(),
                MafeProbe::PreEr => params.pre_er.weight.clone(),
                MafeProbe::Squeeze => params.squeeze.weight.clone(),
                MafeProbe::SqueezeBias => params.squeeze.bias.clone(),
            };
            let params = params.clone();
            let f_d2 = f_d.clone();
            let f_er2 = f_er.clone();
            let f: CaseFn = Box::new(move |tape, probe_var| {
                let dv = if probe == MafeProbe::FD {
                    probe_var
                } else {
                    tape.owned(f_d2.clone(), false)
                };
                let ev = if probe == MafeProbe::FER {
                    probe_var
                } else {
                    tape.owned(f_er2.clone(), false)
                };
                let pdw = if probe == MafeProbe::PreD {
                    probe_var
                } else {
                    tape.owned(params.pre_d.weight.clone(), false)
                };
                let pdb = tape.owned(params.pre_d.bias.clone(), false);
                let pew = if probe == MafeProbe::PreEr {
                    probe_var
                } else {
                    tape.owned(params.pre_er.weight.clone(), false)
                };
                let peb = tape.owned(params.pre_er.bias.clone(), false);
                let sqw = if probe == MafeProbe::Squeeze {
                    probe_var
                } else {
                    tape.owned(params.squeeze.weight.clone(), false)
                };
                let sqb = if probe == MafeProbe::SqueezeBias {
                    probe_var
                } else {
                    tape.owned(params.squeeze.bias.clone(), false)
                };
                let u = tape.conv2d(dv, pdw, pdb, 0)?;
                let u = tape.relu(u);
                let v = tape.conv2d(ev, pew, peb, 0)?;
                let v = tape.relu(v);
                let cat = tape.concat_channels(u, v)?;
                let pooled = tape.global_avg_pool(cat)?;
                let squeezed = tape.linear(pooled, sqw, sqb)?;
                let attention = tape.sigmoid(squeezed);
                let y = tape.channel_mul(attention, dv)?;
                let y2 = tape.mul(y, y)?;
                Ok(tape.sum(y2))
            });
            (probed, f)
        });
    }

    report
}

#[derive(Clone, Copy, PartialEq)]
enum MafeProbe {
    FD,
    FER,
    PreD,
    PreEr,
    Squeeze,
    SqueezeBias,
}

fn net_to_tensor(e: crate::error::NetError) -> TensorError {
    match e {
        crate::error::NetError::Tensor(t) => t,
        other => TensorError::Invalid {
            op: "battery",
            msg: other.to_string(),
        },
    }
}

/// End-to-end gradient checks through the whole model on a reduced
/// configuration: cross-entropy through `forward_pretrain` and the raw
/// score through `forward_score`, probing a handful of parameter tensors.
pub fn run_end_to_end(report: &mut BatteryReport) {
    for kind in FusionKind::ALL {
        let mut config = ModelConfig::new(kind, 5, 77);
        config.stage_widths = vec![3, 4, 5, 6];
        let mut model = UnpairedIqaModel::<f64>::new(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(500);
        // kick the heads off zero so their gradients are informative
        for (name, t) in model.named_params_mut() {
            if name.starts_with("classifier") {
                for v in t.data_mut() {
                    *v = rng.gen_range(-0.2..0.2);
                }
            }
        }
        let i_d = Tensor::from_fn(vec![3, 16, 16], |_| rng.gen_range(0.05..0.95));
        let i_er = Tensor::from_fn(vec![3, 16, 16], |_| rng.gen_range(0.05..0.95));

        let probe_names = ["stem_d.weight", "feb_d.1.conv1.weight", "classifier.weight"];
        for probe_name in probe_names {
            let probed = model
                .named_params()
                .into_iter()
                .find(|(n, _)| n == probe_name)
                .map(|(_, t)| t.clone())
                .expect("probe parameter exists");
            let model = model.clone();
            let i_d = i_d.clone();
            let i_er = i_er.clone();
            let name = format!("forward_pretrain[{kind}]/{probe_name}");
            let f = move |tape: &mut Tape<f64>, probe_var: Var| -> Result<Var, TensorError> {
                let mut m = model.clone();
                // zero the probed tensor inside the clone; the tape var carries the values
                for (n, t) in m.named_params_mut() {
                    if n == probe_name {
                        *t = Tensor::zeros(t.dims().to_vec());
                    }
                }
                let vars = bind_with_substitution(&m, tape, probe_name, probe_var);
                let logits = m
                    .forward_pretrain_tape(tape, &vars, i_d.clone(), Some(i_er.clone()))
                    .map_err(net_to_tensor)?;
                Ok(tape.softmax_cross_entropy(logits, 2)?)
            };
            check_report(&name, grad_check(&f, &probed, EPS, TOL), report);
        }
    }
}

/// Bind a model, replacing the named parameter's tape var with `probe_var`.
/// Leaf data for the probe comes from the gradient checker, everything else
/// from the model clone (owned, so lifetimes stay local).
fn bind_with_substitution<'a>(
    model: &UnpairedIqaModel<f64>,
    tape: &mut Tape<'a, f64>,
    probe_name: &str,
    probe_var: Var,
) -> crate::model::ModelVars {
    // bind owned copies so the tape does not borrow the local model
    let named: Vec<(String, Tensor<f64>)> = model
        .named_params()
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .collect();
    let mut vars_by_name: Vec<(String, Var)> = Vec::with_capacity(named.len());
    for (n, t) in named {
        let v = if n == probe_name {
            probe_var
        } else {
            tape.owned(t, false)
        };
        vars_by_name.push((n, v));
    }
    rebuild_vars(model, &vars_by_name)
}

fn rebuild_vars(
    model: &UnpairedIqaModel<f64>,
    by_name: &[(String, Var)],
) -> crate::model::ModelVars {
    let get = |name: &str| -> Var {
        by_name
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .unwrap_or_else(|| panic!("missing var {name}"))
    };
    let conv = |prefix: &str| crate::params::ConvVars {
        weight: get(&format!("{prefix}.weight")),
        bias: get(&format!("{prefix}.bias")),
    };
    let linear = |prefix: &str| crate::params::LinearVars {
        weight: get(&format!("{prefix}.weight")),
        bias: get(&format!("{prefix}.bias")),
    };
    let feb = |prefix: &str| crate::params::FebVars {
        conv1: conv(&format!("{prefix}.conv1")),
        conv2: conv(&format!("{prefix}.conv2")),
    };
    let ordered: Vec<Var> = by_name.iter().map(|(_, v)| *v).collect();
    crate::model::ModelVars {
        ordered,
        stem_d: conv("stem_d"),
        feb_d: (0..4).map(|i| feb(&format!("feb_d.{i}"))).collect(),
        stem_er: model.stem_er.as_ref().map(|_| conv("stem_er")),
        feb_er: (0..model.feb_er.len())
            .map(|i| feb(&format!("feb_er.{i}")))
            .collect(),
        fusion: model
            .fusion
            .iter()
            .enumerate()
            .map(|(i, p)| match p {
                FusionParams::None => crate::params::FusionVars::None,
                FusionParams::Cosine => crate::params::FusionVars::Cosine,
                FusionParams::Bottleneck(_) => {
                    crate::params::FusionVars::Bottleneck(crate::params::BottleneckVars {
                        fuse: conv(&format!("fusion.{i}.fuse")),
                    })
                }
                FusionParams::Mafe(_) => crate::params::FusionVars::Mafe(crate::params::MafeVars {
                    pre_d: conv(&format!("fusion.{i}.pre_d")),
                    pre_er: conv(&format!("fusion.{i}.pre_er")),
                    squeeze: linear(&format!("fusion.{i}.squeeze")),
                }),
            })
            .collect(),
        classifier: linear("classifier"),
        score_head: model.score_head.as_ref().map(|_| linear("score_head")),
        backbone: model.backbone.as_ref().map(|b| crate::backbone::BackboneVars {
            stem: conv("backbone.stem"),
            febs: (0..b.febs.len())
                .map(|i| feb(&format!("backbone.feb.{i}")))
                .collect(),
            classifier: linear("backbone.classifier"),
        }),
    }
}

use crate::params::FusionParams;
