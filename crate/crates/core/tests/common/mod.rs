#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rgmps_core::autograd::{grad_check, BnMode, GradCheckOptions, GradCheckReport, ParamStore, SpikeForward, Tape, Var};
use rgmps_core::layers::Ctx;
use rgmps_core::model::{RasNet, RasNetConfig};
use rgmps_core::spatial::{PatchSequence, KEY_FLOOR};
use rgmps_core::{Result, Tensor};

pub mod http;

pub type Objective = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

pub struct Case {
    pub name: &'static str,
    /// Input shapes with the range their values are drawn from.
    pub inputs: Vec<(Vec<usize>, f64, f64)>,
    pub f: Objective,
}

fn case(name: &'static str, inputs: Vec<(Vec<usize>, f64, f64)>, f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static) -> Case {
    Case {
        name,
        inputs,
        f: Box::new(f),
    }
}

fn u(shape: &[usize]) -> (Vec<usize>, f64, f64) {
    (shape.to_vec(), -1.0, 1.0)
}

fn pos(shape: &[usize]) -> (Vec<usize>, f64, f64) {
    (shape.to_vec(), 0.5, 1.5)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Max relative error of the reverse gradient of `sum(w ⊙ f(inputs))`
/// for a fixed random `w`.
pub fn check_case(c: &Case, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let mut ids = Vec::new();
    for (i, (shape, lo, hi)) in c.inputs.iter().enumerate() {
        ids.push(store.add(&format!("x{i}"), random_tensor(&mut rng, shape, *lo, *hi))?);
    }
    let mut probe = Tape::new();
    let vars: Vec<Var> = ids.iter().map(|&id| probe.param(&store, id)).collect::<Result<_>>()?;
    let out = (c.f)(&mut probe, &vars)?;
    let weights = random_tensor(&mut rng, probe.shape(out), -1.0, 1.0);
    let report = grad_check(&mut store, &ids, &GradCheckOptions::default(), |t, s| {
        let vars: Vec<Var> = ids.iter().map(|&id| t.param(s, id)).collect::<Result<_>>()?;
        let out = (c.f)(t, &vars)?;
        let w = t.leaf(weights.clone())?;
        let prod = t.mul(out, w)?;
        t.sum(prod)
    })?;
    Ok(report.max_rel_error)
}

fn rope_tables(h: usize, w: usize, c: usize) -> (Vec<f64>, Vec<f64>) {
    let coords = rgmps_core::spatial::grid_coords(h, w);
    rgmps_core::spatial::rope_tables(&coords, c).unwrap()
}

/// One case per differentiable tape operation.
pub fn primitive_cases() -> Vec<Case> {
    vec![
        case("conv2d_3x3_s1", vec![u(&[2, 3, 5, 5]), u(&[4, 3, 3, 3])], |t, v| t.conv2d(v[0], v[1], 1, 1)),
        case("conv2d_3x3_s2", vec![u(&[1, 2, 6, 6]), u(&[3, 2, 3, 3])], |t, v| t.conv2d(v[0], v[1], 2, 1)),
        case("conv2d_1x1", vec![u(&[2, 3, 4, 4]), u(&[2, 3, 1, 1])], |t, v| t.conv2d(v[0], v[1], 1, 0)),
        case("add_channel_bias", vec![u(&[2, 3, 2, 2]), u(&[3])], |t, v| t.add_channel_bias(v[0], v[1])),
        case("maxpool2d", vec![u(&[2, 2, 4, 4])], |t, v| t.maxpool2d(v[0], 2, 2)),
        case("avgpool2d", vec![u(&[1, 2, 4, 4])], |t, v| t.avgpool2d(v[0], 2)),
        case("upsample_nearest", vec![u(&[1, 2, 2, 3])], |t, v| t.upsample_nearest(v[0], 2)),
        case("upsample_bilinear_x2", vec![u(&[2, 2, 3, 3])], |t, v| t.upsample_bilinear(v[0], 2)),
        case("upsample_bilinear_x4", vec![u(&[1, 1, 2, 2])], |t, v| t.upsample_bilinear(v[0], 4)),
        case("batchnorm_train", vec![u(&[3, 2, 2, 2]), pos(&[2]), u(&[2])], |t, v| {
            Ok(t.batchnorm2d(v[0], v[1], v[2], BnMode::Train)?.0)
        }),
        case("batchnorm_eval", vec![u(&[2, 2, 2, 2]), pos(&[2]), u(&[2])], |t, v| {
            let mean = [0.1, -0.2];
            let var = [0.5, 1.5];
            Ok(t.batchnorm2d(v[0], v[1], v[2], BnMode::Eval { mean: &mean, var: &var })?.0)
        }),
        case("add", vec![u(&[2, 3]), u(&[2, 3])], |t, v| t.add(v[0], v[1])),
        case("sub", vec![u(&[2, 3]), u(&[2, 3])], |t, v| t.sub(v[0], v[1])),
        case("mul", vec![u(&[2, 3]), u(&[2, 3])], |t, v| t.mul(v[0], v[1])),
        case("affine", vec![u(&[5])], |t, v| t.affine(v[0], -1.5, 0.25)),
        case("scale_by", vec![u(&[2, 3]), u(&[1])], |t, v| t.scale_by(v[0], v[1])),
        case("mul_per_sample", vec![u(&[2, 2, 2]), u(&[2])], |t, v| t.mul_per_sample(v[0], v[1])),
        case("sigmoid", vec![(vec![6], -4.0, 4.0)], |t, v| t.sigmoid(v[0])),
        case("srelu", vec![u(&[7])], |t, v| t.srelu(v[0])),
        case("softplus", vec![(vec![6], -4.0, 4.0)], |t, v| t.softplus(v[0])),
        case("exp", vec![u(&[4])], |t, v| t.exp(v[0])),
        case("recip", vec![pos(&[4])], |t, v| t.recip(v[0])),
        case("heaviside_smooth", vec![(vec![6], 0.0, 2.0)], |t, v| t.heaviside(v[0], 1.0, 4.0, SpikeForward::Smooth)),
        case("reshape", vec![u(&[2, 3])], |t, v| t.reshape(v[0], &[3, 2])),
        case("concat_channels", vec![u(&[2, 1, 2, 2]), u(&[2, 3, 2, 2])], |t, v| t.concat_channels(&[v[0], v[1]])),
        case("to_tokens", vec![u(&[2, 3, 2, 2])], |t, v| t.to_tokens(v[0])),
        case("from_tokens", vec![u(&[2, 6, 3])], |t, v| t.from_tokens(v[0], 2, 3)),
        case("matmul", vec![u(&[2, 3, 4]), u(&[2, 4, 5])], |t, v| t.matmul(v[0], v[1], false)),
        case("matmul_trans_b", vec![u(&[2, 3, 4]), u(&[2, 5, 4])], |t, v| t.matmul(v[0], v[1], true)),
        case("softmax", vec![(vec![2, 3, 4], -2.0, 2.0)], |t, v| t.softmax(v[0])),
        case("add_leading", vec![u(&[2, 3, 4]), u(&[3, 4])], |t, v| t.add_leading(v[0], v[1])),
        case("relative_bias", vec![u(&[15])], |t, v| t.relative_bias(v[0], 2, 3)),
        case("rope", vec![u(&[2, 4, 2, 3])], |t, v| {
            let (cos, sin) = rope_tables(2, 3, 4);
            t.rope(v[0], cos, sin)
        }),
        case("wkv_per_step_decay", vec![u(&[2, 5, 3]), u(&[2, 5, 3]), (vec![2, 5, 3], 0.2, 0.9), pos(&[3])], |t, v| {
            t.wkv(v[0], v[1], v[2], v[3], 1e-6)
        }),
        case("wkv_shared_decay", vec![u(&[1, 6, 2]), u(&[1, 6, 2]), (vec![1, 1, 2], 0.2, 0.9), pos(&[2])], |t, v| {
            t.wkv(v[0], v[1], v[2], v[3], 1e-6)
        }),
        case("mean_per_sample", vec![u(&[3, 2, 2])], |t, v| t.mean_per_sample(v[0])),
        case("mean_pixels", vec![u(&[2, 3, 2, 2])], |t, v| t.mean_pixels(v[0])),
        case("mse", vec![u(&[2, 3])], |t, v| {
            let target = Tensor::new(vec![2, 3], vec![0.1, -0.3, 0.5, 0.0, 0.9, -1.0])?;
            t.mse(v[0], &target)
        }),
        case("sum", vec![u(&[2, 3])], |t, v| t.sum(v[0])),
    ]
}

/// Full small-config loss, smooth spikes, a few probes per tensor.
pub fn full_model_grad_error(seed: u64) -> GradCheckReport {
    let mut net = RasNet::new(RasNetConfig {
        seed,
        ..RasNetConfig::small()
    })
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let images = random_tensor(&mut rng, &[2, 3, 32, 32], -1.0, 1.0);
    let targets = random_tensor(&mut rng, &[2, 6], -1.0, 1.0);
    let ids = net.store.trainable_ids();
    let layers = net.layers.clone();
    let opts = GradCheckOptions {
        step: 1e-4,
        max_per_param: Some(3),
    };
    grad_check(&mut net.store, &ids, &opts, |t, s| {
        let x = t.leaf(images.clone())?;
        let mut cx = Ctx {
            tape: t,
            store: s,
            train: true,
            spike: SpikeForward::Smooth,
        };
        let y = layers.forward_trace(&mut cx, x)?.action;
        cx.tape.mse(y, &targets)
    })
    .unwrap()
}

/// Random scan input with stabilised (positive) keys.
pub fn random_sequence(rng: &mut ChaCha8Rng, len: usize, c: usize) -> PatchSequence {
    let softplus = |x: f64| x.exp().ln_1p();
    let mut rows = |f: &mut dyn FnMut(&mut ChaCha8Rng) -> f64| -> Vec<Vec<f64>> {
        (0..len).map(|_| (0..c).map(|_| f(rng)).collect()).collect()
    };
    let keys = rows(&mut |r| softplus(r.gen_range(-3.0..3.0)) + KEY_FLOOR);
    let values = rows(&mut |r| r.gen_range(-2.0..2.0));
    let decays = rows(&mut |r| r.gen_range(0.0..2.0));
    let u = (0..c).map(|_| rng.gen_range(0.0..1.0)).collect();
    PatchSequence { keys, values, decays, u }
}

/// Direct summation: `n_i = sum_{j<=i} exp(-sum_{m=j+1..i} W_m) k_j v_j`,
/// likewise `d_i`, then the bonus term for patch `i`.
pub fn wkv_closed_form(seq: &PatchSequence) -> Vec<Vec<f64>> {
    let c = seq.u.len();
    (0..seq.keys.len())
        .map(|i| {
            (0..c)
                .map(|ch| {
                    let (mut num, mut den) = (0.0, 0.0);
                    for j in 0..=i {
                        let w: f64 = (j + 1..=i).map(|m| seq.decays[m][ch]).sum();
                        let g = (-w).exp();
                        num += g * seq.keys[j][ch] * seq.values[j][ch];
                        den += g * seq.keys[j][ch];
                    }
                    let bonus = seq.u[ch].exp() * seq.keys[i][ch];
                    (num + bonus * seq.values[i][ch]) / (den + bonus)
                })
                .collect()
        })
        .collect()
}

pub fn max_rel_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs() / y.abs().max(1e-6))
        .fold(0.0, f64::max)
}

/// `X = B Ī Bᵀ` with `Ī_kl = (δ_kl - 1/n) / n`, one entry at a time.
pub fn naive_mask(b: &[f64], n: usize, c: usize) -> Vec<f64> {
    let nf = n as f64;
    let mut x = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for k in 0..c {
                for l in 0..c {
                    let centre = (if k == l { 1.0 } else { 0.0 } - 1.0 / nf) / nf;
                    acc += b[i * c + k] * centre * b[j * c + l];
                }
            }
            x[i * n + j] = acc;
        }
    }
    x
}

/// Inner product of two keys after rotating each at its own position.
pub fn rotated_inner(a: &[f64], p: (f64, f64), b: &[f64], q: (f64, f64)) -> f64 {
    let ra = rgmps_core::spatial::rope_encode(&[a.to_vec()], &[p]).unwrap();
    let rb = rgmps_core::spatial::rope_encode(&[b.to_vec()], &[q]).unwrap();
    ra[0].iter().zip(&rb[0]).map(|(x, y)| x * y).sum()
}

/// Brute-force Mahalanobis argmin via an explicit Gauss-Jordan inverse.
pub fn brute_force_nearest(x: &[f64], means: &[Vec<f64>], covs: &[Vec<f64>]) -> usize {
    let d = x.len();
    let mut best = (usize::MAX, f64::INFINITY);
    for (j, (mu, cov)) in means.iter().zip(covs).enumerate() {
        let inv = invert(cov, d);
        let diff: Vec<f64> = x.iter().zip(mu).map(|(a, m)| a - m).collect();
        let mut q = 0.0;
        for r in 0..d {
            for s in 0..d {
                q += diff[r] * inv[r * d + s] * diff[s];
            }
        }
        if q < best.1 {
            best = (j, q);
        }
    }
    best.0
}

fn invert(a: &[f64], n: usize) -> Vec<f64> {
    let mut m = a.to_vec();
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        inv[i * n + i] = 1.0;
    }
    for col in 0..n {
        let pivot = (col..n).max_by(|&x, &y| m[x * n + col].abs().total_cmp(&m[y * n + col].abs())).unwrap();
        for k in 0..n {
            m.swap(col * n + k, pivot * n + k);
            inv.swap(col * n + k, pivot * n + k);
        }
        let p = m[col * n + col];
        for k in 0..n {
            m[col * n + k] /= p;
            inv[col * n + k] /= p;
        }
        for r in 0..n {
            if r != col {
                let f = m[r * n + col];
                for k in 0..n {
                    m[r * n + k] -= f * m[col * n + k];
                    inv[r * n + k] -= f * inv[col * n + k];
                }
            }
        }
    }
    inv
}

pub fn tiny_config() -> RasNetConfig {
    RasNetConfig {
        channels: 8,
        head_channels: 4,
        ..RasNetConfig::default()
    }
}

/// Trains a tiny policy for one epoch and lays out `policy.ckpt`,
/// `gmm.json`, `skills.json` and a desk scene whose image is the first
/// demonstration. Returns the scene and registry paths.
pub fn write_skill_library(dir: &std::path::Path) -> (std::path::PathBuf, std::path::PathBuf) {
    use rgmps_core::gmm::{GmmModel, GmmOptions};
    use rgmps_core::harness::dataset;
    use rgmps_core::model::{checkpoint, train, TrainConfig};

    let demos = dataset::generate(8, 11).unwrap();
    let samples: Vec<_> = demos.iter().map(dataset::to_sample).collect();
    let mut net = RasNet::new(tiny_config()).unwrap();
    let tc = TrainConfig {
        epochs: 1,
        batch_size: 4,
        ..TrainConfig::default()
    };
    train(&mut net, &samples, &tc, |_| Ok(())).unwrap();
    checkpoint::save(&net, &dir.join("policy.ckpt")).unwrap();
    let actions: Vec<Vec<f64>> = demos.iter().map(|d| d.action.clone()).collect();
    let opts = GmmOptions {
        k: 3,
        omega: Some(rgmps_core::harness::scene::GRASP_DIMS.to_vec()),
        ..GmmOptions::default()
    };
    std::fs::write(dir.join("gmm.json"), GmmModel::fit(&actions, &opts).unwrap().to_json().unwrap()).unwrap();
    std::fs::write(dir.join("scene.ppm"), demos[0].image.encode()).unwrap();
    let scene = serde_json::json!({
        "image": "scene.ppm",
        "width": 64,
        "height": 64,
        "objects": [
            {"label": "Fanta", "bbox": [20, 10, 34, 28], "shape": {"category": "cylindrical"},
             "lateral_clearance": true, "top_clearance": true},
            {"label": "crushed can", "bbox": [40, 30, 60, 50], "shape": {"category": "crushed"},
             "lateral_clearance": true, "top_clearance": true},
        ],
    });
    std::fs::write(dir.join("scene.json"), scene.to_string()).unwrap();
    let registry = serde_json::json!({
        "version": 1,
        "skills": {"SideGrasp": "policy.ckpt", "Delivery": "policy.ckpt", "TopPinch": "policy.ckpt"},
        "gmm": {"SideGrasp": "gmm.json"},
    });
    std::fs::write(dir.join("skills.json"), registry.to_string()).unwrap();
    (dir.join("scene.json"), dir.join("skills.json"))
}

/// Runs the full pipeline from files on disk.
pub fn infer(instruction: &str, scene_path: &std::path::Path, registry_path: &std::path::Path, use_gmm: bool) -> Result<rgmps_core::harness::ExecutionTrace> {
    use rgmps_core::harness::pipeline::{load_observation, run_inference_pipeline, PipelineInputs, SkillRegistry};
    use rgmps_core::lgss::{ContextSet, RuleEngine, SceneObservation};

    let scene = SceneObservation::from_json(&std::fs::read_to_string(scene_path).unwrap())?;
    let observation = load_observation(&scene, scene_path)?;
    let registry = SkillRegistry::read(registry_path)?;
    let context = ContextSet::bundled();
    let inputs = PipelineInputs {
        instruction,
        scene: &scene,
        observation: &observation,
        context: &context,
        interpreter: &RuleEngine,
        use_gmm,
    };
    run_inference_pipeline(&inputs, &registry)
}
