//! Backward pass versus central finite differences, op by op and for the
//! whole pair loss.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{finite_diff_grad, max_rel_err, Graph, Var};
use crate::classifier::{loss_total, LossTerms, ModelConfig, ModelParams};
use crate::data::{ImageSample, DEFAULT_DOMAIN};
use crate::error::Result;
use crate::labels::LabelVector;
use crate::seeding::derive_rng;
use crate::tensor::Tensor;

pub const TOLERANCE: f64 = 1e-4;
/// Finite-difference steps. Each coordinate keeps whichever estimate is
/// closer to the analytic value: the large step loses to ReLU kinks, the small
/// one to cancellation on tiny gradients.
pub const STEPS: [f64; 2] = [1e-4, 1e-5];

/// Image side and backbone of the whole-loss check.
pub const LOSS_IMAGE: usize = 8;
pub const LOSS_CHANNELS: [usize; 2] = [4, 8];
const LOSS_CLASSES: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct OpCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub coords: usize,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }

    pub fn line(&self) -> String {
        format!(
            "gradcheck op={} max_rel_err={:.3e} coords={} {}",
            self.name,
            self.max_rel_err,
            self.coords,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

type Build = dyn Fn(&mut Graph, &[Var]) -> Result<Var>;

fn coordinate_err(analytic: &Tensor, f: impl Fn(&Tensor) -> f64, x: &Tensor) -> f64 {
    let estimates: Vec<Tensor> = STEPS.iter().map(|&h| finite_diff_grad(&f, x, h)).collect();
    (0..x.numel())
        .map(|i| {
            let a = Tensor::scalar(analytic.data()[i]);
            estimates
                .iter()
                .map(|e| max_rel_err(&a, &Tensor::scalar(e.data()[i])))
                .fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max)
}

/// Reduces a tensor output to a scalar with fixed random weights.
fn project(g: &mut Graph, out: Var, weights: &Tensor) -> Result<Var> {
    if g.value(out).numel() == 1 {
        return Ok(out);
    }
    let w = g.leaf(weights.reshape(g.value(out).shape())?);
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

fn check_op(name: &str, inputs: Vec<Tensor>, build: &Build, rng: &mut ChaCha8Rng) -> Result<OpCheck> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let weights = Tensor::uniform(&[g.value(out).numel()], 1.0, rng);
    let loss = project(&mut g, out, &weights)?;
    g.backward(loss)?;

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        let loss = project(&mut g, out, &weights)?;
        Ok(g.value(loss).data()[0])
    };
    eval(&inputs)?;

    let mut worst = 0.0f64;
    let mut coords = 0;
    for (i, &v) in vars.iter().enumerate() {
        let analytic = g.grad(v)?;
        let err = coordinate_err(
            &analytic,
            |x| {
                let mut xs = inputs.clone();
                xs[i] = x.clone();
                eval(&xs).expect("shapes already validated")
            },
            &inputs[i],
        );
        worst = worst.max(err);
        coords += inputs[i].numel();
    }
    Ok(OpCheck {
        name: name.to_string(),
        max_rel_err: worst,
        coords,
    })
}

/// Uniform values with magnitude in `[0.1, 1]`, keeping ReLU inputs off the kink.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("length matches shape")
}

fn op_checks(rng: &mut ChaCha8Rng) -> Result<Vec<OpCheck>> {
    let u = |shape: &[usize], rng: &mut ChaCha8Rng| Tensor::uniform(shape, 1.0, rng);
    let mut out = Vec::new();

    let cases: Vec<(&str, Vec<Tensor>, Box<Build>)> = vec![
        (
            "matmul",
            vec![u(&[3, 4], rng), u(&[4, 2], rng)],
            Box::new(|g, v| g.matmul(v[0], v[1])),
        ),
        ("transpose", vec![u(&[3, 5], rng)], Box::new(|g, v| g.transpose(v[0]))),
        ("reshape", vec![u(&[2, 3, 2], rng)], Box::new(|g, v| g.reshape(v[0], &[3, 4]))),
        (
            "softmax_columns",
            vec![Tensor::uniform(&[4, 3], 3.0, rng)],
            Box::new(|g, v| g.softmax_columns(v[0])),
        ),
        (
            "sigmoid",
            vec![Tensor::uniform(&[6], 3.0, rng)],
            Box::new(|g, v| Ok(g.sigmoid(v[0]))),
        ),
        ("relu", vec![away_from_zero(&[8], rng)], Box::new(|g, v| Ok(g.relu(v[0])))),
        ("gap", vec![u(&[3, 2, 3], rng)], Box::new(|g, v| g.gap(v[0]))),
        (
            "mul_broadcast",
            vec![u(&[3, 2, 2], rng), u(&[2, 2], rng)],
            Box::new(|g, v| g.mul_broadcast(v[0], v[1])),
        ),
        ("mul", vec![u(&[5], rng), u(&[5], rng)], Box::new(|g, v| g.mul(v[0], v[1]))),
        ("add", vec![u(&[5], rng), u(&[5], rng)], Box::new(|g, v| g.add(v[0], v[1]))),
        (
            "one_minus",
            vec![Tensor::from_fn(&[5], |_| rng.gen_range(0.1..0.9))],
            Box::new(|g, v| g.one_minus(v[0])),
        ),
        ("sum", vec![u(&[2, 3], rng)], Box::new(|g, v| Ok(g.sum(v[0])))),
        (
            "add_channel_bias",
            vec![u(&[3, 2, 2], rng), u(&[3], rng)],
            Box::new(|g, v| g.add_channel_bias(v[0], v[1])),
        ),
        (
            "conv2d",
            vec![u(&[2, 5, 5], rng), u(&[3, 2, 3, 3], rng)],
            Box::new(|g, v| g.conv2d(v[0], v[1], 2, 1)),
        ),
        (
            "affinity",
            vec![u(&[3, 4], rng), u(&[3, 3], rng), u(&[3, 4], rng)],
            Box::new(|g, v| g.affinity(v[0], v[1], v[2])),
        ),
        (
            "sigmoid_ce",
            vec![Tensor::uniform(&[4], 3.0, rng)],
            Box::new(|g, v| g.sigmoid_ce(v[0], &[1.0, 0.0, 1.0, 0.0])),
        ),
    ];
    for (name, inputs, build) in cases {
        out.push(check_op(name, inputs, build.as_ref(), rng)?);
    }
    Ok(out)
}

fn loss_check(rng: &mut ChaCha8Rng) -> Result<OpCheck> {
    let cfg = ModelConfig {
        channels: LOSS_CHANNELS.to_vec(),
        classes: LOSS_CLASSES,
        domains: vec![DEFAULT_DOMAIN.to_string()],
    };
    let mut params = ModelParams::init(&cfg, rng)?;
    // Non-zero biases so every bias gradient path is exercised.
    for b in &mut params.backbone.blocks {
        b.bias = Tensor::uniform(b.bias.shape(), 0.1, rng);
    }
    params.class_layer.bias = Tensor::uniform(params.class_layer.bias.shape(), 0.1, rng);

    let side = LOSS_IMAGE;
    let image = |rng: &mut ChaCha8Rng| Tensor::from_fn(&[3, side, side], |_| rng.gen_range(0.0..1.0));
    let m = ImageSample::unmasked("gc_m", image(rng), LabelVector::from_classes(LOSS_CLASSES, &[1, 2])?, DEFAULT_DOMAIN);
    let n = ImageSample::unmasked("gc_n", image(rng), LabelVector::from_classes(LOSS_CLASSES, &[2, 3])?, DEFAULT_DOMAIN);

    let mut g = Graph::new();
    let fw = loss_total(&mut g, &params, &m, &n, LossTerms::FULL)?;
    let total = fw.total.expect("all terms enabled");
    g.backward(total)?;
    let analytic = fw.model.grads(&g)?;

    let mut worst = 0.0f64;
    let mut coords = 0;
    let count = params.tensors_mut().len();
    for ti in 0..count {
        let base = params.clone();
        let x = base.named()[ti].1.clone();
        let err = coordinate_err(
            &analytic[ti],
            |t| {
                let mut p = base.clone();
                *p.tensors_mut()[ti] = t.clone();
                let mut g = Graph::new();
                loss_total(&mut g, &p, &m, &n, LossTerms::FULL)
                    .expect("shapes already validated")
                    .breakdown
                    .total
            },
            &x,
        );
        worst = worst.max(err);
        coords += x.numel();
    }
    Ok(OpCheck {
        name: "loss_total".into(),
        max_rel_err: worst,
        coords,
    })
}

/// Every op check followed by the whole-loss check.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<OpCheck>> {
    let mut rng = derive_rng(seed, &[GRADCHECK_STREAM]);
    let mut checks = op_checks(&mut rng)?;
    checks.push(loss_check(&mut rng)?);
    Ok(checks)
}

const GRADCHECK_STREAM: u64 = 0x6772_6164;
