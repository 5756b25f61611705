//! Finite-difference gradient checks for every differentiable op, every
//! loss and the end-to-end model, in double precision.

use nic_core::losses::{
    combined_loss, compression_loss, cycle_loss, ms_ssim_loss, mse_loss, LossConfig, SsimParams,
};
use nic_core::model::{decode, encode_features, init_params, residual_block, ModelConfig, Partition};
use nic_core::tensor::{Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{away_from_zero, grad_check, relative_error, rng, uniform_tensor, FD_STEP};

pub const TOLERANCE: f64 = 1e-3;

/// Probed coordinates per input tensor.
const COORDS: usize = 48;

/// `sum(v * r)` with `r` a fixed random constant, so every output element
/// contributes a distinct weight to the gradient.
fn weighted_sum(tape: &mut Tape<f64>, v: Var, r: &Tensor<f64>) -> nic_core::Result<Var> {
    let c = tape.constant(r.clone());
    let p = tape.mul(v, c)?;
    Ok(tape.sum(p))
}

type Builder = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> nic_core::Result<Var>>;

/// One check: inputs plus a scalar function of them, generated per seed.
type Case = fn(&mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Builder);

fn unary(shape: &[usize], x: Tensor<f64>, rng: &mut ChaCha8Rng, f: fn(&mut Tape<f64>, Var) -> Var) -> (Vec<Tensor<f64>>, Builder) {
    let r = uniform_tensor(shape, -1.0, 1.0, rng);
    (vec![x], Box::new(move |t, v| {
        let y = f(t, v[0]);
        weighted_sum(t, y, &r)
    }))
}

fn binary(
    a: Tensor<f64>,
    b: Tensor<f64>,
    rng: &mut ChaCha8Rng,
    f: fn(&mut Tape<f64>, Var, Var) -> nic_core::Result<Var>,
) -> (Vec<Tensor<f64>>, Builder) {
    let r = uniform_tensor(a.shape(), -1.0, 1.0, rng);
    (vec![a, b], Box::new(move |t, v| {
        let y = f(t, v[0], v[1])?;
        weighted_sum(t, y, &r)
    }))
}

const S: [usize; 3] = [2, 3, 4];

pub fn op_cases() -> Vec<(&'static str, Case)> {
    vec![
        ("conv2d 3x3 stride 1 pad 1", |rng| {
            let x = uniform_tensor(&[2, 3, 5, 6], -1.0, 1.0, rng);
            let w = uniform_tensor(&[4, 3, 3, 3], -1.0, 1.0, rng);
            let b = uniform_tensor(&[4], -1.0, 1.0, rng);
            let r = uniform_tensor(&[2, 4, 5, 6], -1.0, 1.0, rng);
            (vec![x, w, b], Box::new(move |t, v| {
                let y = t.conv2d(v[0], v[1], v[2], 1, 1)?;
                weighted_sum(t, y, &r)
            }))
        }),
        ("conv2d 4x4 stride 2 pad 1", |rng| {
            let x = uniform_tensor(&[1, 2, 8, 6], -1.0, 1.0, rng);
            let w = uniform_tensor(&[3, 2, 4, 4], -1.0, 1.0, rng);
            let b = uniform_tensor(&[3], -1.0, 1.0, rng);
            let r = uniform_tensor(&[1, 3, 4, 3], -1.0, 1.0, rng);
            (vec![x, w, b], Box::new(move |t, v| {
                let y = t.conv2d(v[0], v[1], v[2], 2, 1)?;
                weighted_sum(t, y, &r)
            }))
        }),
        ("conv2d 1x1", |rng| {
            let x = uniform_tensor(&[2, 4, 3, 3], -1.0, 1.0, rng);
            let w = uniform_tensor(&[2, 4, 1, 1], -1.0, 1.0, rng);
            let b = uniform_tensor(&[2], -1.0, 1.0, rng);
            let r = uniform_tensor(&[2, 2, 3, 3], -1.0, 1.0, rng);
            (vec![x, w, b], Box::new(move |t, v| {
                let y = t.conv2d(v[0], v[1], v[2], 1, 0)?;
                weighted_sum(t, y, &r)
            }))
        }),
        ("conv2d_transpose 4x4 stride 2 pad 1", |rng| {
            let x = uniform_tensor(&[2, 3, 3, 4], -1.0, 1.0, rng);
            let w = uniform_tensor(&[3, 2, 4, 4], -1.0, 1.0, rng);
            let b = uniform_tensor(&[2], -1.0, 1.0, rng);
            let r = uniform_tensor(&[2, 2, 6, 8], -1.0, 1.0, rng);
            (vec![x, w, b], Box::new(move |t, v| {
                let y = t.conv2d_transpose(v[0], v[1], v[2], 2, 1)?;
                weighted_sum(t, y, &r)
            }))
        }),
        ("leaky_relu", |rng| {
            let x = away_from_zero(&S, 0.05, 2.0, rng);
            unary(&S, x, rng, |t, v| t.leaky_relu(v, 0.2))
        }),
        ("relu", |rng| {
            let x = away_from_zero(&S, 0.05, 2.0, rng);
            unary(&S, x, rng, |t, v| t.relu(v))
        }),
        ("sigmoid", |rng| {
            let x = uniform_tensor(&S, -4.0, 4.0, rng);
            unary(&S, x, rng, |t, v| t.sigmoid(v))
        }),
        ("abs", |rng| {
            let x = away_from_zero(&S, 0.05, 2.0, rng);
            unary(&S, x, rng, |t, v| t.abs(v))
        }),
        ("square", |rng| {
            let x = uniform_tensor(&S, -2.0, 2.0, rng);
            unary(&S, x, rng, |t, v| t.square(v))
        }),
        ("sqrt", |rng| {
            let x = uniform_tensor(&S, 0.1, 2.0, rng);
            unary(&S, x, rng, |t, v| t.sqrt(v))
        }),
        ("powf", |rng| {
            let x = uniform_tensor(&S, 0.1, 2.0, rng);
            unary(&S, x, rng, |t, v| t.powf(v, 0.2856))
        }),
        ("clamp_min", |rng| {
            // Half the entries sit below the floor, half above, none near it.
            let x = Tensor::from_fn(&S, |_| if rng.gen_bool(0.5) { rng.gen_range(-1.0..0.2) } else { rng.gen_range(0.4..2.0) });
            unary(&S, x, rng, |t, v| t.clamp_min(v, 0.3))
        }),
        ("scale", |rng| {
            let x = uniform_tensor(&S, -2.0, 2.0, rng);
            unary(&S, x, rng, |t, v| t.scale(v, -1.7))
        }),
        ("add_scalar", |rng| {
            let x = uniform_tensor(&S, -2.0, 2.0, rng);
            unary(&S, x, rng, |t, v| t.add_scalar(v, 0.9))
        }),
        ("reshape", |rng| {
            let x = uniform_tensor(&S, -2.0, 2.0, rng);
            unary(&[6, 4], x, rng, |t, v| t.reshape(v, &[6, 4]).unwrap())
        }),
        ("batch_item", |rng| {
            let x = uniform_tensor(&S, -2.0, 2.0, rng);
            unary(&[1, 3, 4], x, rng, |t, v| t.batch_item(v, 1).unwrap())
        }),
        ("sum", |rng| {
            let x = uniform_tensor(&S, -2.0, 2.0, rng);
            unary(&[], x, rng, |t, v| {
                let s = t.sum(v);
                t.square(s)
            })
        }),
        ("mean", |rng| {
            let x = uniform_tensor(&S, -2.0, 2.0, rng);
            unary(&[], x, rng, |t, v| {
                let s = t.mean(v);
                t.square(s)
            })
        }),
        ("l1_norm", |rng| {
            let x = away_from_zero(&S, 0.05, 2.0, rng);
            unary(&[], x, rng, |t, v| {
                let s = t.l1_norm(v);
                t.square(s)
            })
        }),
        ("l2_norm", |rng| {
            let x = uniform_tensor(&S, -2.0, 2.0, rng);
            unary(&[], x, rng, |t, v| {
                let s = t.l2_norm(v);
                t.square(s)
            })
        }),
        ("add", |rng| {
            let (a, b) = (uniform_tensor(&S, -2.0, 2.0, rng), uniform_tensor(&S, -2.0, 2.0, rng));
            binary(a, b, rng, |t, x, y| t.add(x, y))
        }),
        ("sub", |rng| {
            let (a, b) = (uniform_tensor(&S, -2.0, 2.0, rng), uniform_tensor(&S, -2.0, 2.0, rng));
            binary(a, b, rng, |t, x, y| t.sub(x, y))
        }),
        ("mul", |rng| {
            let (a, b) = (uniform_tensor(&S, -2.0, 2.0, rng), uniform_tensor(&S, -2.0, 2.0, rng));
            binary(a, b, rng, |t, x, y| t.mul(x, y))
        }),
        ("mul by scalar", |rng| {
            let (a, b) = (uniform_tensor(&S, -2.0, 2.0, rng), uniform_tensor(&[], -2.0, 2.0, rng));
            binary(a, b, rng, |t, x, y| t.mul(x, y))
        }),
        ("div", |rng| {
            let (a, b) = (uniform_tensor(&S, -2.0, 2.0, rng), away_from_zero(&S, 0.3, 2.0, rng));
            binary(a, b, rng, |t, x, y| t.div(x, y))
        }),
        ("div of scalars", |rng| {
            let (a, b) = (uniform_tensor(&[], -2.0, 2.0, rng), away_from_zero(&[], 0.3, 2.0, rng));
            binary(a, b, rng, |t, x, y| t.div(x, y))
        }),
        ("residual block", |rng| {
            // Redraw until every leaky-ReLU input is clear of the kink by
            // more than a finite-difference step can move it.
            loop {
                let x = uniform_tensor(&[1, 8, 4, 4], -1.0, 1.0, rng);
                let w1 = uniform_tensor(&[2, 8, 1, 1], -0.5, 0.5, rng);
                let w2 = uniform_tensor(&[2, 2, 3, 3], -0.5, 0.5, rng);
                let w3 = uniform_tensor(&[8, 2, 1, 1], -0.5, 0.5, rng);
                let b1 = uniform_tensor(&[2], -0.1, 0.1, rng);
                let b2 = uniform_tensor(&[2], -0.1, 0.1, rng);
                let b3 = uniform_tensor(&[8], -0.1, 0.1, rng);
                let inputs = vec![x, w1, b1, w2, b2, w3, b3];
                if min_preactivation(&inputs) < 1e-3 {
                    continue;
                }
                let r = uniform_tensor(&[1, 8, 4, 4], -1.0, 1.0, rng);
                return (inputs, Box::new(move |t, v| {
                    let y = residual_block(t, v[0], &[(v[1], v[2]), (v[3], v[4]), (v[5], v[6])], 0.2)?;
                    weighted_sum(t, y, &r)
                }));
            }
        }),
    ]
}

/// Smallest magnitude among the inputs of the three leaky ReLUs of a
/// residual block built from `[x, w1, b1, w2, b2, w3, b3]`.
fn min_preactivation(v: &[Tensor<f64>]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = v.iter().map(|t| tape.constant(t.clone())).collect();
    let a1 = tape.leaky_relu(vars[0], 0.2);
    let h1 = tape.conv2d(a1, vars[1], vars[2], 1, 0).unwrap();
    let a2 = tape.leaky_relu(h1, 0.2);
    let h2 = tape.conv2d(a2, vars[3], vars[4], 1, 1).unwrap();
    [vars[0], h1, h2]
        .iter()
        .flat_map(|&p| tape.value(p).data().to_vec())
        .fold(f64::INFINITY, |m, x| m.min(x.abs()))
}

fn image_pair(shape: &[usize], rng: &mut ChaCha8Rng) -> (Tensor<f64>, Tensor<f64>) {
    let a = uniform_tensor(shape, 0.05, 0.95, rng);
    let noise = uniform_tensor(shape, -0.2, 0.2, rng);
    let b = Tensor::new(shape.to_vec(), a.data().iter().zip(noise.data()).map(|(x, n)| (x + n).clamp(0.01, 0.99)).collect()).unwrap();
    (a, b)
}

pub fn loss_cases() -> Vec<(&'static str, Case)> {
    vec![
        ("compression objective", |rng| {
            let x = uniform_tensor(&[2, 4, 3, 3], 0.01, 0.99, rng);
            (vec![x], Box::new(|t, v| compression_loss(t, v[0], 0.01)))
        }),
        ("mse", |rng| {
            let (a, b) = image_pair(&[2, 3, 4, 4], rng);
            (vec![a, b], Box::new(|t, v| mse_loss(t, v[0], v[1])))
        }),
        ("ms-ssim loss, 2 scales", |rng| {
            let (a, b) = image_pair(&[1, 3, 24, 24], rng);
            (vec![a, b], Box::new(|t, v| ms_ssim_loss(t, v[0], v[1], &SsimParams::default())))
        }),
        ("ms-ssim loss, 3 scales, batch 2", |rng| {
            let (a, b) = image_pair(&[2, 1, 48, 44], rng);
            (vec![a, b], Box::new(|t, v| ms_ssim_loss(t, v[0], v[1], &SsimParams::default())))
        }),
        ("cycle loss", |rng| {
            let params = init_params::<f64>(&ModelConfig::toy(), rng.gen()).unwrap();
            let (a, b) = image_pair(&[1, 3, 16, 16], rng);
            (vec![a, b], Box::new(move |t, v| cycle_loss(t, v[0], v[1], &params)))
        }),
        ("combined three-term objective", |rng| {
            let params = init_params::<f64>(&ModelConfig::toy(), rng.gen()).unwrap();
            let (a, b) = image_pair(&[1, 3, 24, 24], rng);
            let code = uniform_tensor(&[1, 4, 3, 3], 0.01, 0.99, rng);
            (vec![a, b, code], Box::new(move |t, v| {
                let cfg = LossConfig::mse_msssim_cycle();
                let terms = combined_loss(t, v[0], v[1], v[2], &cfg, &params, &SsimParams::default())?;
                Ok(terms.total)
            }))
        }),
    ]
}

/// Worst relative error of `case` over `seeds` seeds.
pub fn run_case(case: Case, seeds: u64) -> f64 {
    (0..seeds)
        .map(|seed| {
            let mut rng = rng(1000 + seed);
            let (inputs, build) = case(&mut rng);
            grad_check(&inputs, COORDS, &mut rng, build)
        })
        .fold(0.0, f64::max)
}

/// End-to-end check of the whole autoencoder with the binarization skipped
/// (the straight-through rounding has no finite-difference counterpart):
/// image -> encoder -> decoder -> MSE + gamma * compression. Probes `coords`
/// random coordinates of every parameter tensor and of the input image and
/// returns the error of the whole probed gradient vector. Nudging a bias
/// shifts a full channel, so some stencils cross a leaky-ReLU kink; those
/// coordinates are differenced with the largest halved step that is smooth.
pub fn model_check(config: &ModelConfig, size: usize, seed: u64, coords: usize) -> ModelCheck {
    let mut rng = rng(seed);
    let params = init_params::<f64>(config, seed).unwrap();
    let image = uniform_tensor(&[1, 3, size, size], 0.0, 1.0, &mut rng);
    let parts = [Partition::Encoder, Partition::Decoder];

    let objective = |params: &nic_core::model::AutoencoderParams<f64>, image: &Tensor<f64>, grads: bool| {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, if grads { &parts } else { &[] });
        let x = tape.leaf(image.clone(), grads);
        let code = encode_features(&mut tape, x, &bound, &params.config).unwrap();
        let recon = decode(&mut tape, code, &bound, &params.config).unwrap();
        let mse = mse_loss(&mut tape, x, recon).unwrap();
        let comp = compression_loss(&mut tape, code, 0.01).unwrap();
        let comp = tape.scale(comp, 1e-2);
        let total = tape.add(mse, comp).unwrap();
        let value = tape.value(total).item();
        if !grads {
            return (value, Vec::new());
        }
        tape.backward(total).unwrap();
        let mut g = bound.grads(&tape, &parts);
        g.push(tape.grad(x).unwrap().to_vec());
        (value, g)
    };

    let (_, analytic) = objective(&params, &image, true);
    let n_tensors = params.tensors(&parts).len();
    let (mut a, mut n) = (Vec::new(), Vec::new());
    let mut kinked = 0;
    for (k, grad) in analytic.iter().enumerate() {
        let picked = rand::seq::index::sample(&mut rng, grad.len(), coords.min(grad.len())).into_vec();
        for i in picked {
            let eval_at = |delta: f64| {
                let (mut p, mut img) = (params.clone(), image.clone());
                if k < n_tensors {
                    p.tensors_mut(&parts)[k].data_mut()[i] += delta;
                } else {
                    img.data_mut()[i] += delta;
                }
                objective(&p, &img, false).0
            };
            let central = |h: f64| (eval_at(h) - eval_at(-h)) / (2.0 * h);
            let mut h = FD_STEP;
            let mut d = central(h);
            for _ in 0..MAX_HALVINGS {
                let finer = central(h / 2.0);
                if smooth_on_stencil(d, finer) {
                    break;
                }
                h /= 2.0;
                d = finer;
            }
            if h < FD_STEP {
                kinked += 1;
            }
            a.push(grad[i]);
            n.push(d);
        }
    }
    ModelCheck { error: relative_error(&a, &n, 1e-8), probed: a.len(), kinked }
}

/// Result of a whole-model gradient check.
pub struct ModelCheck {
    pub error: f64,
    pub probed: usize,
    /// Coordinates whose default stencil straddled an activation kink and
    /// were differenced with a smaller step instead.
    pub kinked: usize,
}

const MAX_HALVINGS: usize = 6;

/// On a smooth stretch, central differences at h and h/2 agree to O(h^2)
/// (about 1e-9 here); a leaky-ReLU kink inside the stencil breaks that by
/// orders of magnitude, and the difference quotient stops being an oracle.
fn smooth_on_stencil(full: f64, half: f64) -> bool {
    (full - half).abs() <= 1e-5 * full.abs().max(half.abs()) + 1e-10
}

/// Desk widths with a four-channel code.
pub fn desk_c4() -> ModelConfig {
    ModelConfig {
        code_channels: 4,
        ..ModelConfig::desk()
    }
}
