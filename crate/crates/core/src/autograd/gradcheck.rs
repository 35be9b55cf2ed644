//! Central-difference gradient verification and the op registry the
//! `bench gradcheck` command runs.

use super::{backward, no_grad};
use crate::dtype::DType;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, Xoshiro256StarStar};
use crate::runtime::Runtime;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradcheckOptions {
    /// Central-difference step.
    pub h: f64,
    /// Max allowed relative error, against `max(1, |analytic|)`.
    pub tol: f64,
    /// Skip input coordinates within `kink_guard` of 0 (relu-style kinks).
    pub kink_guard: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            h: 1e-6,
            tol: 1e-4,
            kink_guard: 0.0,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct GradcheckReport {
    pub op: String,
    pub coords: usize,
    pub max_rel_err: f64,
    pub pass: bool,
}

impl GradcheckReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

type ScalarFn<'a> = dyn Fn(&[Tensor]) -> Result<Tensor> + 'a;

/// Compare engine gradients of the scalar function `f` against central
/// differences `(f(x + h e) - f(x - h e)) / 2h`, coordinate by coordinate.
/// Inputs must be F64.
pub fn gradcheck(
    op: &str,
    f: &ScalarFn<'_>,
    inputs: &[Tensor],
    opts: GradcheckOptions,
) -> Result<GradcheckReport> {
    for t in inputs {
        if t.dtype() != DType::F64 {
            return Err(Error::UnsupportedDType {
                op: "gradcheck",
                dtype: t.dtype(),
            });
        }
    }
    let rt = inputs
        .first()
        .map(|t| t.runtime().clone())
        .expect("gradcheck needs at least one input");
    let data: Vec<Vec<f64>> = inputs
        .iter()
        .map(Tensor::to_vec_f64)
        .collect::<Result<_>>()?;
    let shapes: Vec<Vec<usize>> = inputs.iter().map(|t| t.shape().to_vec()).collect();

    // analytic gradients from one recorded forward + backward
    let leaves: Vec<Tensor> = data
        .iter()
        .zip(&shapes)
        .map(|(d, s)| Tensor::from_f64(&rt, d, s)?.requiring_grad())
        .collect::<Result<_>>()?;
    let out = f(&leaves)?;
    if !out.is_scalar_shaped() {
        return Err(Error::NonScalarOutput(out.shape().to_vec()));
    }
    backward(&out)?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| match l.grad() {
            Some(g) => g.to_vec_f64(),
            None => Ok(vec![0.0; l.numel()]),
        })
        .collect::<Result<_>>()?;

    let eval = |data: &[Vec<f64>]| -> Result<f64> {
        no_grad(|| {
            let xs: Vec<Tensor> = data
                .iter()
                .zip(&shapes)
                .map(|(d, s)| Tensor::from_f64(&rt, d, s))
                .collect::<Result<_>>()?;
            f(&xs)?.item_f64()
        })
    };

    let mut max_rel_err = 0.0f64;
    let mut coords = 0usize;
    let mut perturbed = data.clone();
    for i in 0..inputs.len() {
        for j in 0..data[i].len() {
            let x = data[i][j];
            if opts.kink_guard > 0.0 && x.abs() < opts.kink_guard {
                continue;
            }
            coords += 1;
            perturbed[i][j] = x + opts.h;
            let plus = eval(&perturbed)?;
            perturbed[i][j] = x - opts.h;
            let minus = eval(&perturbed)?;
            perturbed[i][j] = x;
            let numeric = (plus - minus) / (2.0 * opts.h);
            let rel = (numeric - analytic[i][j]).abs() / analytic[i][j].abs().max(1.0);
            if rel > max_rel_err {
                max_rel_err = rel;
            }
        }
    }
    Ok(GradcheckReport {
        op: op.to_string(),
        coords,
        max_rel_err,
        pass: max_rel_err <= opts.tol,
    })
}

// ---- registry ---------------------------------------------------------------

type BuildFn = fn(&Runtime, u64) -> Result<(Vec<Tensor>, Box<dyn Fn(&[Tensor]) -> Result<Tensor>>)>;

/// One differentiable op (or composite) registered for verification.
pub struct GradcheckCase {
    pub name: &'static str,
    /// Multiple of `h` within which input coordinates are skipped
    /// (documented kinks such as relu at 0).
    pub kink_guard_h: f64,
    build: BuildFn,
}

fn rand_vec(rng: &mut Xoshiro256StarStar, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.next_normal()).collect()
}

fn tensor_in(rt: &Runtime, rng: &mut Xoshiro256StarStar, shape: &[usize]) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    Tensor::from_f64(rt, &rand_vec(rng, n), shape)
}

/// Positive, bounded away from zero: |z|/4 + 0.5.
fn positive_in(rt: &Runtime, rng: &mut Xoshiro256StarStar, shape: &[usize]) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = rand_vec(rng, n)
        .into_iter()
        .map(|z| z.abs() * 0.25 + 0.5)
        .collect();
    Tensor::from_f64(rt, &data, shape)
}

fn weight_const(rt: &Runtime, rng: &mut Xoshiro256StarStar, shape: &[usize]) -> Result<Tensor> {
    tensor_in(rt, rng, shape)
}

macro_rules! binary_case {
    ($name:literal, $method:ident) => {
        GradcheckCase {
            name: $name,
            kink_guard_h: 0.0,
            build: |rt, seed| {
                let mut rng = Xoshiro256StarStar::new(derive_seed(seed, 0x10));
                let a = tensor_in(rt, &mut rng, &[3, 4])?;
                // broadcast operand; bounded away from zero so div stays smooth
                let b = positive_in(rt, &mut rng, &[4])?;
                Ok((
                    vec![a, b],
                    Box::new(|xs: &[Tensor]| xs[0].$method(&xs[1])?.sum(None)),
                ))
            },
        }
    };
}

/// Every registered gradcheck case. `bench gradcheck` runs them all.
pub fn gradcheck_cases() -> Vec<GradcheckCase> {
    vec![
        binary_case!("add", add),
        binary_case!("sub", sub),
        binary_case!("mul", mul),
        binary_case!("div", div),
        GradcheckCase {
            name: "neg",
            kink_guard_h: 0.0,
            build: |rt, seed| {
                let mut rng = Xoshiro256StarStar::new(derive_seed(seed, 0x11));
                let x = tensor_in(rt, &mut rng, &[2, 5])?;
                Ok((vec![x], Box::new(|xs: &[Tensor]| xs[0].neg()?.sum(None))))
            },
        },
        GradcheckCase {
            name: "exp",
            kink_guard_h: 0.0,
            build: |rt, seed| {
                let mut rng = Xoshiro256StarStar::new(derive_seed(seed, 0x12));
                let x = tensor_in(rt, &mut rng, &[2, 5])?;
                Ok((vec![x], Box::new(|xs: &[Tensor]| xs[0].exp()?.sum(None))))
            },
        },
        GradcheckCase {
            name: "log",
            kink_guard_h: 0.0,
            build: |rt, seed| {
                let mut rng = Xoshiro256StarStar::new(derive_seed(seed, 0x13));
                let x = positive_in(rt, &mut rng, &[2, 5])?;
                Ok((vec![x], Box::new(|xs: &[Tensor]| xs[0].log()?.sum(None))))
            },
        },
        GradcheckCase {
            name: "sqrt",
            kink_guard_h: 0.0,
            build: |rt, seed| {
                let mut rng = Xoshiro256StarStar::new(derive_seed(seed, 0x14));
                let x = positive_in(rt, &mut rng, &[2, 5])?;
                Ok((vec![x], Box::new(|xs: &[Tensor]| xs[0].sqrt()?.sum(None))))
            },
        },
        GradcheckCase {
            name: "relu",
            kink_guard_h: 1.0,
            build: |rt, seed| {
                let mut rng = Xoshiro256StarStar::new(derive_seed(seed, 0x15));
                let x = tensor_in(rt, &mut rng, &[3, 7])?;
                let c = weight_const(rt, &mut rng, &[3, 7])?;
                Ok((
                    vec![x],
                    Box::new(move |xs: &[Tensor]| xs[0].relu()?.mul(&c)?.sum(None)),
                ))
            },
        },
        GradcheckCase {
            name: "matmul",
            kink_guard_h: 0.0,
            build: |rt, seed| {
                let mut rng = Xoshiro256StarStar::new(derive_seed(seed, 0x16));
                let a = tensor_in(rt, &mut rng, &[3, 4])?;
                let b = tensor_in(rt, &mut rng, &[4, 2])?;
                Ok((
                    vec![a, b],
                    Box::new(|xs: &[Tensor]| xs[0].matmul(&xs[1])?.sum(None)),
                ))
            },
        },
        GradcheckCase {
            name: "conv2d",
            kink_guard_h: 0.0,
            build: |rt, seed| {
                let mut rng = Xoshiro256StarStar::new(derive_seed(seed, 0x17));
                let x = tensor_in(rt, &mut rng, &[1, 2, 5, 5])?;
                let w = tensor_in(rt, &mut rng, &[3, 2, 3, 3])?;
                let b = tensor_in(rt, &mut rng, &[3])?;
                Ok((
                    vec![x, w, b],
                    Box::new(|xs: &[Tensor]| {
                        xs[0].conv2d(&xs[1], Some(&xs[2]), 1, 1)?.sum(None)
                    }),
                ))
            },
        },
        GradcheckCase {
            name: "conv2d_strided",
            kink_guard_h: 0.0,
            build: |rt, seed| {
                let mut rng = Xoshiro256StarStar::new(derive_seed(seed, 0x18));
                let x = tensor_in(rt, &mut rng, &[2, 1, 6, 6])?;
                let w = tensor_in(rt, &mut rng, &[2, 1, 3, 3])?;
                Ok((
                    vec![x, w],
                    Box::new(|xs: &[Tensor]| xs[0].conv2d(&xs[1], None, 2, 0)?.sum(None)),
                ))
            },
        },
        GradcheckCase {
            name: "sum",
            kink_guard_h: 0.0,
            build: |rt, seed| {
                let mut rng = Xoshiro256StarStar::new(derive_seed(seed, 0x19));
                let x = tensor_in(rt, &mut rng, &[3, 4])?;
                let c = weight_const(rt, &mut rng, &[3])?;
                Ok((
                    vec![x],
                    Box::new(move |xs: &[Tensor]| xs[0].sum(Some(1))?.mul(&c)?.sum(None)),
                ))
            },
        },
        GradcheckCase {
            name: "mean",
            kink_guard_h: 0.0,
            build: |rt, seed| {
                let mut rng = Xoshiro256StarStar::new(derive_seed(seed, 0x1a));
                let x = tensor_in(rt, &mut rng, &[4, 3])?;
                let c = weight_const(rt, &mut rng, &[3])?;
                Ok((
                    vec![x],
                    Box::new(move |xs: &[Tensor]| xs[0].mean(Some(0))?.mul(&c)?.sum(None)),
                ))
            },
        },
        GradcheckCase {
            name: "max",
            kink_guard_h: 0.0,
            build: |rt, seed| {
                let mut rng = Xoshiro256StarStar::new(derive_seed(seed, 0x1b));
                let x = tensor_in(rt, &mut rng, &[4, 5])?;
                let c = weight_const(rt, &mut rng, &[4])?;
                Ok((
                    vec![x],
                    Box::new(move |xs: &[Tensor]| xs[0].max_reduce(Some(1))?.mul(&c)?.sum(None)),
                ))
            },
        },
        GradcheckCase {
            name: "softmax",
            kink_guard_h: 0.0,
            build: |rt, seed| {
                let mut rng = Xoshiro256StarStar::new(derive_seed(seed, 0x1c));
                let x = tensor_in(rt, &mut rng, &[3, 6])?;
                let c = weight_const(rt, &mut rng, &[3, 6])?;
                Ok((
                    vec![x],
                    Box::new(move |xs: &[Tensor]| xs[0].softmax(1)?.mul(&c)?.sum(None)),
                ))
            },
        },
        GradcheckCase {
            name: "log_softmax",
            kink_guard_h: 0.0,
            build: |rt, seed| {
                let mut rng = Xoshiro256StarStar::new(derive_seed(seed, 0x1d));
                let x = tensor_in(rt, &mut rng, &[3, 6])?;
                let c = weight_const(rt, &mut rng, &[3, 6])?;
                Ok((
                    vec![x],
                    Box::new(move |xs: &[Tensor]| xs[0].log_softmax(1)?.mul(&c)?.sum(None)),
                ))
            },
        },
        GradcheckCase {
            name: "dropout",
            kink_guard_h: 0.0,
            build: |rt, seed| {
                let mut rng = Xoshiro256StarStar::new(derive_seed(seed, 0x1e));
                let x = tensor_in(rt, &mut rng, &[4, 8])?;
                let mask_seed = derive_seed(seed, 0x1f);
                Ok((
                    vec![x],
                    Box::new(move |xs: &[Tensor]| {
                        // fixed mask: the function is deterministic in x
                        xs[0].dropout(0.3, true, mask_seed)?.sum(None)
                    }),
                ))
            },
        },
        GradcheckCase {
            name: "views",
            kink_guard_h: 0.0,
            build: |rt, seed| {
                let mut rng = Xoshiro256StarStar::new(derive_seed(seed, 0x20));
                let x = tensor_in(rt, &mut rng, &[2, 12])?;
                let c = weight_const(rt, &mut rng, &[6, 2])?;
                Ok((
                    vec![x],
                    Box::new(move |xs: &[Tensor]| {
                        let r = xs[0].reshape(&[4, 6])?;
                        let t = r.transpose(0, 1)?;
                        let s = t.slice(1, 1, 3)?;
                        s.mul(&c)?.sum(None)
                    }),
                ))
            },
        },
        GradcheckCase {
            name: "inplace",
            kink_guard_h: 0.0,
            build: |rt, seed| {
                let mut rng = Xoshiro256StarStar::new(derive_seed(seed, 0x21));
                let x = tensor_in(rt, &mut rng, &[3, 4])?;
                let y = tensor_in(rt, &mut rng, &[3, 4])?;
                let z = positive_in(rt, &mut rng, &[4])?;
                Ok((
                    vec![x, y, z],
                    Box::new(|xs: &[Tensor]| {
                        // mutations of a grad-carrying intermediate must be
                        // differentiated through (history rebase)
                        let mut t = xs[0].mul_scalar(2.0)?;
                        t.add_(&xs[1])?;
                        t.mul_(&xs[2])?;
                        t.sum(None)
                    }),
                ))
            },
        },
        GradcheckCase {
            name: "linear",
            kink_guard_h: 0.0,
            build: |rt, seed| {
                let mut rng = Xoshiro256StarStar::new(derive_seed(seed, 0x22));
                let x = tensor_in(rt, &mut rng, &[4, 3])?;
                let w = tensor_in(rt, &mut rng, &[3, 2])?;
                let b = tensor_in(rt, &mut rng, &[2])?;
                let c = weight_const(rt, &mut rng, &[4, 2])?;
                Ok((
                    vec![x, w, b],
                    Box::new(move |xs: &[Tensor]| {
                        xs[0].matmul(&xs[1])?.add(&xs[2])?.mul(&c)?.sum(None)
                    }),
                ))
            },
        },
        GradcheckCase {
            name: "cnn",
            kink_guard_h: 1.0,
            build: |rt, seed| {
                let mut rng = Xoshiro256StarStar::new(derive_seed(seed, 0x23));
                let x = tensor_in(rt, &mut rng, &[2, 1, 6, 6])?;
                let wc = tensor_in(rt, &mut rng, &[3, 1, 3, 3])?;
                let bc = tensor_in(rt, &mut rng, &[3])?;
                let wf = tensor_in(rt, &mut rng, &[48, 4])?;
                let bf = tensor_in(rt, &mut rng, &[4])?;
                let onehot = {
                    let mut data = vec![0.0f64; 2 * 4];
                    data[1] = 1.0;
                    data[4 + 2] = 1.0;
                    Tensor::from_f64(rt, &data, &[2, 4])?
                };
                Ok((
                    vec![x, wc, bc, wf, bf],
                    Box::new(move |xs: &[Tensor]| {
                        // conv -> relu -> flatten -> linear -> log_softmax -> nll
                        let t = xs[0].conv2d(&xs[1], Some(&xs[2]), 1, 0)?;
                        let t = t.relu()?;
                        let t = t.flatten_from(1)?;
                        let t = t.matmul(&xs[3])?.add(&xs[4])?;
                        let logp = t.log_softmax(1)?;
                        logp.mul(&onehot)?.sum(None)?.neg()
                    }),
                ))
            },
        },
    ]
}

/// Run one registered case at `seeds`, aggregating the worst error.
pub fn run_gradcheck_case(
    rt: &Runtime,
    case: &GradcheckCase,
    seeds: &[u64],
    opts: GradcheckOptions,
) -> Result<GradcheckReport> {
    let mut report = GradcheckReport {
        op: case.name.to_string(),
        coords: 0,
        max_rel_err: 0.0,
        pass: true,
    };
    let case_opts = GradcheckOptions {
        kink_guard: opts.h * case.kink_guard_h,
        ..opts
    };
    for &seed in seeds {
        let (inputs, f) = (case.build)(rt, seed)?;
        let r = gradcheck(case.name, f.as_ref(), &inputs, case_opts)?;
        report.coords += r.coords;
        report.max_rel_err = report.max_rel_err.max(r.max_rel_err);
        report.pass &= r.pass;
    }
    Ok(report)
}

/// Run all cases (or just `filter`) over `seeds`.
pub fn run_gradcheck_suite(
    rt: &Runtime,
    filter: Option<&str>,
    seeds: &[u64],
    opts: GradcheckOptions,
) -> Result<Vec<GradcheckReport>> {
    let cases = gradcheck_cases();
    let selected: Vec<&GradcheckCase> = match filter {
        None => cases.iter().collect(),
        Some(name) => {
            let matched: Vec<&GradcheckCase> = cases.iter().filter(|c| c.name == name).collect();
            if matched.is_empty() {
                return Err(Error::UnknownOp(name.to_string()));
            }
            matched
        }
    };
    selected
        .into_iter()
        .map(|case| run_gradcheck_case(rt, case, seeds, opts))
        .collect()
}
