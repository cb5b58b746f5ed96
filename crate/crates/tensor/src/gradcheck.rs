use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TensorError};
use crate::ops::Ops;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Compares reverse-mode gradients of a scalar function with central
/// finite differences.
///
/// Returns `max_i |autodiff_i - fd_i| / max(1, |fd_i|)`.
pub fn grad_check<F>(f: F, point: &Tensor, perturbation: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &Tensor) -> Result<Tensor>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point, true);
    let y = f(&mut tape, &x)?;
    let analytic = tape.backward(&y)?.get_or_zeros(&x);

    let eval = |data: Vec<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(point.shape().to_vec(), data)?, false);
        let y = f(&mut tape, &x)?;
        y.item().ok_or_else(|| TensorError::NotScalar(y.shape().to_vec()))
    };

    let mut worst: f64 = 0.0;
    for i in 0..point.numel() {
        let mut plus = point.data().to_vec();
        plus[i] += perturbation;
        let mut minus = point.data().to_vec();
        minus[i] -= perturbation;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * perturbation);
        if !fd.is_finite() {
            return Err(TensorError::NonFinite { op: "grad_check" });
        }
        let err = (analytic.data()[i] - fd).abs() / fd.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Outcome of checking one primitive at many random points.
#[derive(Clone, Debug)]
pub struct PrimitiveCheck {
    pub op: &'static str,
    pub points: usize,
    pub max_relative_error: f64,
}

type Case = (&'static str, Box<dyn Fn(&mut ChaCha8Rng) -> Graph>);

/// A random computation graph built around one primitive.
struct Graph {
    inputs: Vec<Tensor>,
    body: Box<dyn Fn(&mut Tape, &[Tensor]) -> Result<Tensor>>,
}

/// Checks every primitive against central differences at `points` random
/// graphs each, differentiating w.r.t. every input.
///
/// Each graph applies the primitive and contracts the output with a
/// random weight tensor so that all output coordinates matter. Relu inputs
/// are kept at least 0.05 away from the kink.
pub fn primitive_gradient_suite(seed: u64, points: usize) -> Result<Vec<PrimitiveCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (name, make) in cases() {
        let mut worst: f64 = 0.0;
        for _ in 0..points {
            let graph = make(&mut rng);
            let weights = random(&mut rng, &output_shape(&graph)?, -1.0, 1.0);
            for slot in 0..graph.inputs.len() {
                let f = |tape: &mut Tape, x: &Tensor| -> Result<Tensor> {
                    let mut ins = graph.inputs.clone();
                    ins[slot] = x.clone();
                    let y = (graph.body)(tape, &ins)?;
                    let y = tape.mul(&y, &weights)?;
                    tape.sum(&y)
                };
                worst = worst.max(grad_check(f, &graph.inputs[slot], 1e-5)?);
            }
        }
        out.push(PrimitiveCheck {
            op: name,
            points,
            max_relative_error: worst,
        });
    }
    Ok(out)
}

fn output_shape(g: &Graph) -> Result<Vec<usize>> {
    let mut tape = Tape::new();
    Ok((g.body)(&mut tape, &g.inputs)?.shape().to_vec())
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

fn away_from_zero(t: Tensor, margin: f64) -> Tensor {
    let data = t
        .data()
        .iter()
        .map(|&v| if v.abs() >= margin { v } else if v < 0.0 { -margin } else { margin })
        .collect();
    Tensor::from_parts(t.shape().to_vec(), data)
}

fn graph(inputs: Vec<Tensor>, body: impl Fn(&mut Tape, &[Tensor]) -> Result<Tensor> + 'static) -> Graph {
    Graph {
        inputs,
        body: Box::new(body),
    }
}

fn boxes(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    let mut data = Vec::with_capacity(n * 4);
    for _ in 0..n {
        data.push(rng.random_range(-1.0..1.0));
        data.push(rng.random_range(-1.0..1.0));
        data.push(rng.random_range(1.5..3.0));
        data.push(rng.random_range(1.5..3.0));
    }
    Tensor::from_parts(vec![n, 4], data)
}

fn cases() -> Vec<Case> {
    vec![
        ("add", Box::new(|r| graph(vec![random(r, &[3, 4], -2.0, 2.0), random(r, &[3, 4], -2.0, 2.0)], |t, x| t.add(&x[0], &x[1])))),
        ("sub", Box::new(|r| graph(vec![random(r, &[3, 4], -2.0, 2.0), random(r, &[3, 4], -2.0, 2.0)], |t, x| t.sub(&x[0], &x[1])))),
        ("mul", Box::new(|r| graph(vec![random(r, &[3, 4], -2.0, 2.0), random(r, &[3, 4], -2.0, 2.0)], |t, x| t.mul(&x[0], &x[1])))),
        ("add_bias", Box::new(|r| graph(vec![random(r, &[2, 3, 4], -2.0, 2.0), random(r, &[4], -1.0, 1.0)], |t, x| t.add_bias(&x[0], &x[1])))),
        ("mul_cells", Box::new(|r| graph(vec![random(r, &[2, 3, 4], -2.0, 2.0), random(r, &[2, 3, 1], -1.0, 1.0)], |t, x| t.mul_cells(&x[0], &x[1])))),
        ("matmul", Box::new(|r| graph(vec![random(r, &[3, 5], -1.0, 1.0), random(r, &[5, 2], -1.0, 1.0)], |t, x| t.matmul(&x[0], &x[1])))),
        ("conv2d", Box::new(|r| graph(vec![random(r, &[5, 4, 2], -1.0, 1.0), random(r, &[3, 3, 2, 3], -0.5, 0.5)], |t, x| t.conv2d(&x[0], &x[1])))),
        ("relu", Box::new(|r| graph(vec![away_from_zero(random(r, &[4, 3], -2.0, 2.0), 0.05)], |t, x| t.relu(&x[0])))),
        ("sigmoid", Box::new(|r| graph(vec![random(r, &[4, 3], -4.0, 4.0)], |t, x| t.sigmoid(&x[0])))),
        ("exp", Box::new(|r| graph(vec![random(r, &[4, 3], -2.0, 2.0)], |t, x| t.exp(&x[0])))),
        ("log1m", Box::new(|r| graph(vec![random(r, &[4, 3], 0.0, 0.9)], |t, x| t.log1m(&x[0])))),
        ("softmax_channel", Box::new(|r| graph(vec![random(r, &[4, 3], -3.0, 3.0)], |t, x| t.softmax_channel(&x[0])))),
        ("log_softmax_channel", Box::new(|r| graph(vec![random(r, &[4, 3], -3.0, 3.0)], |t, x| t.log_softmax_channel(&x[0])))),
        ("scale", Box::new(|r| {
            let c = r.random_range(-3.0..3.0);
            graph(vec![random(r, &[4, 3], -2.0, 2.0)], move |t, x| t.scale(&x[0], c))
        })),
        ("sum", Box::new(|r| graph(vec![random(r, &[4, 3], -2.0, 2.0)], |t, x| t.sum(&x[0])))),
        ("sum_channels", Box::new(|r| graph(vec![random(r, &[2, 3, 4], -2.0, 2.0)], |t, x| t.sum_channels(&x[0])))),
        ("mean_sq", Box::new(|r| graph(vec![random(r, &[4, 3], -2.0, 2.0), random(r, &[4, 3], -2.0, 2.0)], |t, x| t.mean_sq(&x[0], &x[1])))),
        ("smooth_l1", Box::new(|r| {
            // keep differences away from the |d| = 1 seam
            let a = random(r, &[4, 3], -2.0, 2.0);
            let d = away_from_zero(random(r, &[4, 3], -0.4, 0.4), 0.05);
            let far = random(r, &[4, 3], 1.5, 2.5);
            let pick: Vec<f64> = (0..12).map(|i| if i % 2 == 0 { d.data()[i] } else { far.data()[i] }).collect();
            let b: Vec<f64> = a.data().iter().zip(&pick).map(|(x, p)| x - p).collect();
            graph(vec![a, Tensor::from_parts(vec![4, 3], b)], |t, x| t.smooth_l1(&x[0], &x[1]))
        })),
        ("reshape", Box::new(|r| graph(vec![random(r, &[4, 3], -2.0, 2.0)], |t, x| t.reshape(&x[0], &[2, 6])))),
        ("slice_channels", Box::new(|r| graph(vec![random(r, &[3, 5], -2.0, 2.0)], |t, x| t.slice_channels(&x[0], 1, 3)))),
        ("concat_channels", Box::new(|r| graph(vec![random(r, &[2, 3, 2], -2.0, 2.0), random(r, &[2, 3, 3], -2.0, 2.0)], |t, x| t.concat_channels(&[&x[0], &x[1]])))),
        ("avg_pool2", Box::new(|r| graph(vec![random(r, &[4, 6, 2], -2.0, 2.0)], |t, x| t.avg_pool2(&x[0])))),
        ("upsample2", Box::new(|r| graph(vec![random(r, &[2, 3, 2], -2.0, 2.0)], |t, x| t.upsample2(&x[0])))),
        ("box_iou", Box::new(|r| graph(vec![boxes(r, 5), boxes(r, 5)], |t, x| t.box_iou(&x[0], &x[1])))),
    ]
}
