use rand_distr::StandardNormal;

use super::{Graph, Tensor, TensorError, Var};

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences at `point`.
///
/// Returns `max_i |analytic_i - numeric_i| / max(1, |numeric_i|)`.
pub fn grad_check<F>(f: F, point: &Tensor, h: f64) -> Result<f64, TensorError>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>, TensorError>,
{
    let graph = Graph::new();
    let x = graph.variable(point.clone());
    let y = f(&graph, x)?;
    let grads = graph.backward(y)?;
    let analytic = grads
        .wrt(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(point.shape()));

    let eval = |p: Tensor| -> Result<f64, TensorError> {
        let g = Graph::inference();
        let x = g.constant(p);
        Ok(f(&g, x)?.item())
    };

    let mut worst: f64 = 0.0;
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] += h;
        let mut minus = point.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Standard-normal tensor of `shape`.
pub fn normal_tensor(shape: &[usize], rng: &mut impl rand::Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

pub type ScalarFn = Box<dyn for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>, TensorError>>;

/// One differentiable op wrapped as a scalar function of a single input.
pub struct OpCase {
    pub name: &'static str,
    /// Shape of the input the function expects.
    pub shape: Vec<usize>,
    pub f: ScalarFn,
}

/// Every differentiable op, each reduced to a scalar through a fixed random
/// projection so that all output coordinates are exercised.
pub fn op_suite(r: &mut crate::rng::Rng) -> Vec<OpCase> {
    let proj = |shape: &[usize], r: &mut crate::rng::Rng| normal_tensor(shape, r);
    let c34 = normal_tensor(&[3, 4], r);
    let c4 = normal_tensor(&[4], r);
    let c3 = normal_tensor(&[3], r);
    let c42 = normal_tensor(&[4, 2], r);
    let c245 = normal_tensor(&[2, 4, 5], r);
    let p34 = proj(&[3, 4], r);
    let p32 = proj(&[3, 2], r);
    let p43 = proj(&[4, 3], r);
    let p235 = proj(&[2, 3, 5], r);
    let p24 = proj(&[2, 4], r);
    let p4 = proj(&[4], r);
    let p3 = proj(&[3], r);
    let p64 = proj(&[6, 4], r);
    let p54 = proj(&[5, 4], r);
    let p5 = proj(&[5], r);
    let p243 = proj(&[2, 4, 3], r);

    macro_rules! case {
        ($name:expr, $shape:expr, $f:expr) => {
            OpCase {
                name: $name,
                shape: $shape.to_vec(),
                f: mk($f),
            }
        };
    }
    fn mk<F>(f: F) -> ScalarFn
    where
        F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>, TensorError> + 'static,
    {
        Box::new(f)
    }
    fn dot<'g>(g: &'g Graph, v: Var<'g>, p: &Tensor) -> Result<Var<'g>, TensorError> {
        Ok(v.mul(&g.constant(p.clone()))?.sum())
    }
    vec![
        case!("add", [3, 4], {
            let (c, p) = (c34.clone(), p34.clone());
            move |g, x| dot(g, x.add(&g.constant(c.clone()))?.square(), &p)
        }),
        case!("sub", [3, 4], {
            let (c, p) = (c34.clone(), p34.clone());
            move |g, x| dot(g, g.constant(c.clone()).sub(&x)?.square(), &p)
        }),
        case!("mul", [3, 4], {
            let (c, p) = (c34.clone(), p34.clone());
            move |g, x| dot(g, x.mul(&g.constant(c.clone()))?.mul(&x)?, &p)
        }),
        case!("div", [3, 4], {
            let p = p34.clone();
            move |g, x| {
                let d = x.square().add_scalar(1.0);
                dot(g, x.div(&d)?, &p)
            }
        }),
        case!("add_last", [4], {
            let (c, p) = (c34.clone(), p34.clone());
            move |g, x| dot(g, g.constant(c.clone()).add_last(&x)?.square(), &p)
        }),
        case!("mul_last", [4], {
            let (c, p) = (c34.clone(), p34.clone());
            move |g, x| dot(g, g.constant(c.clone()).mul_last(&x)?.mul_last(&x)?, &p)
        }),
        case!("mul_rows", [3], {
            let (c, p) = (c34.clone(), p34.clone());
            move |g, x| dot(g, g.constant(c.clone()).mul_rows(&x)?.mul_rows(&x)?, &p)
        }),
        case!("mul_rows_lhs", [3, 4], {
            let (c, p) = (c3.clone(), p34.clone());
            move |g, x| dot(g, x.square().mul_rows(&g.constant(c.clone()))?, &p)
        }),
        case!("scale", [3, 4], {
            let p = p34.clone();
            move |g, x| dot(g, x.scale(-2.5).square(), &p)
        }),
        case!("add_scalar", [3, 4], {
            let p = p34.clone();
            move |g, x| dot(g, x.add_scalar(0.3).square(), &p)
        }),
        case!("exp", [3, 4], {
            let p = p34.clone();
            move |g, x| dot(g, x.exp(), &p)
        }),
        case!("log", [3, 4], {
            let p = p34.clone();
            move |g, x| dot(g, x.square().add_scalar(0.5).log(), &p)
        }),
        case!("relu", [3, 4], {
            let p = p34.clone();
            move |g, x| dot(g, x.add_scalar(0.05).relu().square(), &p)
        }),
        case!("tanh", [3, 4], {
            let p = p34.clone();
            move |g, x| dot(g, x.tanh(), &p)
        }),
        case!("sigmoid", [3, 4], {
            let p = p34.clone();
            move |g, x| dot(g, x.sigmoid(), &p)
        }),
        case!("softplus", [3, 4], {
            let p = p34.clone();
            move |g, x| dot(g, x.scale(3.0).softplus(), &p)
        }),
        case!("sqrt", [3, 4], {
            let p = p34.clone();
            move |g, x| dot(g, x.square().add_scalar(0.2).sqrt(), &p)
        }),
        case!("matmul_lhs", [3, 4], {
            let (c, p) = (c42.clone(), p32.clone());
            move |g, x| dot(g, x.matmul(&g.constant(c.clone()))?, &p)
        }),
        case!("matmul_rhs", [4, 2], {
            let (c, p) = (c34.clone(), p32.clone());
            move |g, x| dot(g, g.constant(c.clone()).matmul(&x)?.square(), &p)
        }),
        case!("bmm_lhs", [2, 3, 4], {
            let (c, p) = (c245.clone(), p235.clone());
            move |g, x| dot(g, x.bmm(&g.constant(c.clone()))?, &p)
        }),
        case!("bmm_rhs", [2, 4, 5], {
            let p = p235.clone();
            let mut rr = crate::rng::from_seed(9);
            let c = normal_tensor(&[2, 3, 4], &mut rr);
            move |g, x| dot(g, g.constant(c.clone()).bmm(&x)?.square(), &p)
        }),
        case!("transpose", [3, 4], {
            let p = p43.clone();
            move |g, x| dot(g, x.t()?.square(), &p)
        }),
        case!("transpose_last2", [2, 3, 4], {
            let p = p243.clone();
            move |g, x| dot(g, x.transpose_last2()?.exp(), &p)
        }),
        case!("reshape", [3, 4], {
            let p = proj(&[12], &mut crate::rng::from_seed(14));
            move |g, x| dot(g, x.square().reshape(&[6, 2])?.reshape(&[12])?, &p)
        }),
        case!("sum_axis0", [3, 4], {
            let p = p4.clone();
            move |g, x| dot(g, x.square().sum_axis(0)?, &p)
        }),
        case!("mean_axis1", [3, 4], {
            let p = p3.clone();
            move |g, x| dot(g, x.exp().mean_axis(1)?, &p)
        }),
        case!("mean_axis_mid", [2, 3, 4], {
            let p = p24.clone();
            move |g, x| dot(g, x.square().mean_axis(1)?, &p)
        }),
        case!("softmax", [3, 4], {
            let p = p34.clone();
            move |g, x| dot(g, x.softmax_last(), &p)
        }),
        case!("log_softmax", [3, 4], {
            let p = p34.clone();
            move |g, x| dot(g, x.log_softmax_last(), &p)
        }),
        case!("logsumexp", [3, 4], {
            let p = p3.clone();
            move |g, x| dot(g, x.logsumexp_last(), &p)
        }),
        case!("concat0", [3, 4], {
            let (c, p) = (c34.clone(), p64.clone());
            move |g, x| dot(g, Var::concat(&[x.square(), g.constant(c.clone())], 0)?, &p)
        }),
        case!("concat1", [3, 4], {
            let p = proj(&[3, 8], &mut crate::rng::from_seed(11));
            move |g, x| dot(g, Var::concat(&[x.exp(), x.square()], 1)?, &p)
        }),
        case!("slice", [3, 4], {
            let p = proj(&[3, 2], &mut crate::rng::from_seed(12));
            move |g, x| dot(g, x.square().slice(1, 1, 2)?, &p)
        }),
        case!("gather_rows", [3, 4], {
            let p = p54.clone();
            move |g, x| dot(g, x.gather_rows(&[2, 0, 2, 1, 0])?.square(), &p)
        }),
        case!("scatter_add_rows", [3, 4], {
            let p = p54.clone();
            move |g, x| dot(g, x.square().scatter_add_rows(&[4, 0, 4], 5)?, &p)
        }),
        case!("gather_flat", [3, 4], {
            let p = p5.clone();
            move |g, x| dot(g, x.exp().gather_flat(&[11, 0, 5, 5, 3])?, &p)
        }),
        case!("layer_norm", [3, 4], {
            let p = p34.clone();
            move |g, x| dot(g, x.layer_norm_last(), &p)
        }),
        case!("l2_normalize", [3, 4], {
            let p = p34.clone();
            move |g, x| dot(g, x.l2_normalize_last(), &p)
        }),
        case!("cosine", [4], {
            let c = c4.clone();
            move |g, x| x.cosine(&g.constant(c.clone()))
        }),
        case!("cosine_matrix", [3, 4], {
            let (c, p) = (c34.clone(), proj(&[3, 3], &mut crate::rng::from_seed(13)));
            move |g, x| dot(g, x.cosine_matrix(&g.constant(c.clone()))?, &p)
        }),
    ]
}

