//! Autograd engine behavior: tape recording, backward semantics, version
//! safety, custom functions, and memory release.

use microtorch::autograd::{
    accumulate_grad, apply_custom, backward, backward_with, gradcheck, no_grad, BackwardContext,
    CustomFunction, FunctionContext, GradcheckOptions,
};
use microtorch::dtype::DType;
use microtorch::error::Error;
use microtorch::tensor::Tensor;
use microtorch::Runtime;
use std::sync::Arc;

fn rt() -> Runtime {
    Runtime::new()
}

fn leaf(rt: &Runtime, data: &[f64], shape: &[usize]) -> Tensor {
    Tensor::from_f64(rt, data, shape)
        .unwrap()
        .requiring_grad()
        .unwrap()
}

#[test]
fn square_sum_gradient() {
    let rt = rt();
    let x = leaf(&rt, &[1.0, 2.0, 3.0], &[3]);
    let y = x.mul(&x).unwrap().sum(None).unwrap();
    backward(&y).unwrap();
    assert_eq!(x.grad().unwrap().to_vec_f64().unwrap(), vec![2.0, 4.0, 6.0]);
}

#[test]
fn recording_follows_grad_mode() {
    let rt = rt();
    let x = leaf(&rt, &[3.0], &[]);
    let y = x.mul(&x).unwrap();
    assert!(y.requires_grad(), "recorded: output carries history");

    let z = no_grad(|| x.mul(&x).unwrap());
    assert!(!z.requires_grad(), "suppressed inside no_grad");
}

#[test]
fn mixed_grad_inputs_leave_plain_side_untouched() {
    let rt = rt();
    let a = leaf(&rt, &[1.0, 2.0], &[2]);
    let b = Tensor::from_f64(&rt, &[5.0, 6.0], &[2]).unwrap();
    let y = a.add(&b).unwrap().sum(None).unwrap();
    backward(&y).unwrap();
    assert_eq!(a.grad().unwrap().to_vec_f64().unwrap(), vec![1.0, 1.0]);
    assert!(b.grad().is_none());
}

#[test]
fn double_backward_without_retain_errors() {
    let rt = rt();
    let x = leaf(&rt, &[3.0], &[]);
    let y = x.mul(&x).unwrap();
    backward(&y).unwrap();
    assert!(matches!(
        backward(&y).unwrap_err(),
        Error::DoubleBackwardWithoutRetain
    ));
}

#[test]
fn retain_allows_second_backward() {
    let rt = rt();
    let x = leaf(&rt, &[3.0], &[]);
    let y = x.mul(&x).unwrap();
    backward_with(&y, None, true).unwrap();
    backward_with(&y, None, false).unwrap();
    // two passes accumulated: 2 * (2x) = 12
    assert_eq!(x.grad().unwrap().item_f64().unwrap(), 12.0);
}

#[test]
fn mutating_a_saved_tensor_fails_backward() {
    let rt = rt();
    let w = leaf(&rt, &[2.0, 3.0], &[2]);
    let mut x = Tensor::from_f64(&rt, &[4.0, 5.0], &[2]).unwrap();
    let y = w.mul(&x).unwrap().sum(None).unwrap();
    x.add_scalar_(1.0).unwrap(); // mutate between forward and backward
    let err = backward(&y).unwrap_err();
    match err {
        Error::VersionMismatch { op, expected, actual } => {
            assert_eq!(op, "mul", "error names the recording op");
            assert_eq!(expected, 0);
            assert_eq!(actual, 1);
        }
        other => panic!("expected VersionMismatch, got {other:?}"),
    }
}

#[test]
fn backward_needs_upstream_for_non_scalar() {
    let rt = rt();
    let x = leaf(&rt, &[1.0, 2.0], &[2]);
    let y = x.mul(&x).unwrap();
    assert!(matches!(
        backward(&y).unwrap_err(),
        Error::MissingUpstreamForNonScalar
    ));
    let up = Tensor::from_f64(&rt, &[1.0, 10.0], &[2]).unwrap();
    backward_with(&y, Some(&up), false).unwrap();
    assert_eq!(x.grad().unwrap().to_vec_f64().unwrap(), vec![2.0, 40.0]);
}

#[test]
fn accumulation_sums_across_graphs() {
    let rt = rt();
    let x = leaf(&rt, &[1.0], &[1]);
    let up = Tensor::from_f64(&rt, &[1.0], &[1]).unwrap();
    let y1 = x.mul_scalar(1.0).unwrap();
    let y2 = x.mul_scalar(2.0).unwrap();
    backward_with(&y1, Some(&up), false).unwrap();
    assert_eq!(x.grad().unwrap().to_vec_f64().unwrap(), vec![1.0]);
    backward_with(&y2, Some(&up), false).unwrap();
    assert_eq!(x.grad().unwrap().to_vec_f64().unwrap(), vec![3.0]);
}

#[test]
fn accumulate_grad_checks_shape() {
    let rt = rt();
    let x = leaf(&rt, &[1.0, 2.0], &[2]);
    let g = Tensor::from_f64(&rt, &[1.0, 1.0], &[2]).unwrap();
    accumulate_grad(&x, &g).unwrap();
    accumulate_grad(&x, &g).unwrap();
    assert_eq!(x.grad().unwrap().to_vec_f64().unwrap(), vec![2.0, 2.0]);
    let bad = Tensor::from_f64(&rt, &[1.0], &[1]).unwrap();
    assert!(matches!(
        accumulate_grad(&x, &bad).unwrap_err(),
        Error::ShapeMismatch(_)
    ));
}

#[test]
fn broadcast_bias_receives_column_summed_gradient() {
    let rt = rt();
    let x = Tensor::from_f64(&rt, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]).unwrap();
    let b = leaf(&rt, &[0.1, 0.2, 0.3], &[3]);
    let y = x.add(&b).unwrap().sum(None).unwrap();
    backward(&y).unwrap();
    assert_eq!(
        b.grad().unwrap().to_vec_f64().unwrap(),
        vec![2.0, 2.0, 2.0],
        "gradient sums over the broadcast batch dimension"
    );
}

#[test]
fn fanout_gradient_equals_sum_of_paths() {
    let rt = rt();
    let data = [0.5, -1.25, 2.0];
    // combined: L = f(x) + g(x)
    let x = leaf(&rt, &data, &[3]);
    let y = x.mul(&x).unwrap().sum(None).unwrap();
    let z = x.exp().unwrap().sum(None).unwrap();
    let l = y.add(&z).unwrap();
    backward(&l).unwrap();
    let combined = x.grad().unwrap().to_vec_f64().unwrap();

    // two separate single-path backwards
    let x1 = leaf(&rt, &data, &[3]);
    backward(&x1.mul(&x1).unwrap().sum(None).unwrap()).unwrap();
    let x2 = leaf(&rt, &data, &[3]);
    backward(&x2.exp().unwrap().sum(None).unwrap()).unwrap();
    let per_path: Vec<f64> = x1
        .grad()
        .unwrap()
        .to_vec_f64()
        .unwrap()
        .iter()
        .zip(&x2.grad().unwrap().to_vec_f64().unwrap())
        .map(|(a, b)| a + b)
        .collect();
    for (c, p) in combined.iter().zip(&per_path) {
        assert!((c - p).abs() < 1e-12);
    }
}

// ---- detach / GAN pattern ------------------------------------------------------

#[test]
fn detach_blocks_gradient_flow_but_shares_storage() {
    let rt = rt();
    let g_param = leaf(&rt, &[2.0], &[1]);
    let fake = g_param.mul_scalar(3.0).unwrap();
    let detached = fake.detach();
    assert!(!detached.requires_grad());

    // discriminator-style loss through the detached fake
    let d_param = leaf(&rt, &[4.0], &[1]);
    let loss = d_param.mul(&detached).unwrap().sum(None).unwrap();
    backward(&loss).unwrap();
    assert!(d_param.grad().is_some());
    assert!(
        g_param.grad().is_none(),
        "generator params untouched through detach"
    );

    // storage is shared: an in-place write through the detached handle is
    // visible through the original
    let mut d2 = fake.detach();
    no_grad(|| d2.add_scalar_(1.0)).unwrap();
    assert_eq!(fake.to_vec_f64().unwrap(), vec![7.0]);
}

// ---- in-place rules ---------------------------------------------------------------

#[test]
fn inplace_on_grad_leaf_is_rejected_in_grad_mode() {
    let rt = rt();
    let mut w = leaf(&rt, &[1.0], &[1]);
    assert!(matches!(
        w.add_scalar_(1.0).unwrap_err(),
        Error::InplaceOnLeafRequiringGrad
    ));
    // through a view of the same storage too
    let mut view = w.detach();
    assert!(matches!(
        view.add_scalar_(1.0).unwrap_err(),
        Error::InplaceOnLeafRequiringGrad
    ));
    // allowed under no_grad (the optimizer path)
    no_grad(|| w.add_scalar_(1.0)).unwrap();
    assert_eq!(w.to_vec_f64().unwrap(), vec![2.0]);
}

#[test]
fn inplace_on_intermediate_differentiates_through_the_mutation() {
    let rt = rt();
    // t = 2x; t *= 3; L = sum(t)  =>  dL/dx = 6
    let x = leaf(&rt, &[1.0, 2.0], &[2]);
    let mut t = x.mul_scalar(2.0).unwrap();
    let three = Tensor::from_f64(&rt, &[3.0], &[]).unwrap();
    t.mul_(&three).unwrap();
    let l = t.sum(None).unwrap();
    backward(&l).unwrap();
    assert_eq!(x.grad().unwrap().to_vec_f64().unwrap(), vec![6.0, 6.0]);
}

#[test]
fn inplace_add_routes_gradient_to_both_sides() {
    let rt = rt();
    let x = leaf(&rt, &[1.0, 1.0], &[2]);
    let z = leaf(&rt, &[5.0], &[1]);
    let mut t = x.mul_scalar(1.0).unwrap();
    t.add_(&z).unwrap(); // broadcast operand
    backward(&t.sum(None).unwrap()).unwrap();
    assert_eq!(x.grad().unwrap().to_vec_f64().unwrap(), vec![1.0, 1.0]);
    assert_eq!(z.grad().unwrap().to_vec_f64().unwrap(), vec![2.0]);
}

#[test]
fn zero_inplace_kills_gradient_to_history() {
    let rt = rt();
    let x = leaf(&rt, &[3.0], &[1]);
    let mut t = x.mul_scalar(2.0).unwrap();
    t.zero_().unwrap();
    let c = leaf(&rt, &[4.0], &[1]);
    let l = t.mul(&c).unwrap().sum(None).unwrap();
    backward(&l).unwrap();
    assert!(x.grad().is_none(), "zeroed value is independent of x");
    assert_eq!(c.grad().unwrap().to_vec_f64().unwrap(), vec![0.0]);
}

// ---- custom functions ----------------------------------------------------------------

struct Square;

impl CustomFunction for Square {
    fn name(&self) -> &'static str {
        "square"
    }

    fn forward(&self, ctx: &mut FunctionContext, inputs: &[Tensor]) -> microtorch::Result<Vec<Tensor>> {
        ctx.save_tensor(&inputs[0]);
        Ok(vec![inputs[0].mul(&inputs[0])?])
    }

    fn backward(
        &self,
        ctx: &BackwardContext<'_>,
        upstream: &[Tensor],
    ) -> microtorch::Result<Vec<Option<Tensor>>> {
        let x = ctx.saved_tensor(0)?;
        Ok(vec![Some(upstream[0].mul(&x)?.mul_scalar(2.0)?)])
    }
}

#[test]
fn custom_square_matches_builtin_composition() {
    let rt = rt();
    let data = [1.5, -2.0, 0.25];
    let x = leaf(&rt, &data, &[3]);
    let y = apply_custom(Arc::new(Square), &[x.clone()]).unwrap().remove(0);
    backward(&y.sum(None).unwrap()).unwrap();
    let custom = x.grad().unwrap().to_vec_f64().unwrap();

    let x2 = leaf(&rt, &data, &[3]);
    backward(&x2.mul(&x2).unwrap().sum(None).unwrap()).unwrap();
    let builtin = x2.grad().unwrap().to_vec_f64().unwrap();
    for (c, b) in custom.iter().zip(&builtin) {
        assert!((c - b).abs() < 1e-12);
    }
}

struct WrongArity;

impl CustomFunction for WrongArity {
    fn forward(&self, _: &mut FunctionContext, inputs: &[Tensor]) -> microtorch::Result<Vec<Tensor>> {
        Ok(vec![inputs[0].add(&inputs[1])?])
    }

    fn backward(
        &self,
        _: &BackwardContext<'_>,
        upstream: &[Tensor],
    ) -> microtorch::Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(upstream[0].clone())]) // 1 gradient for 2 inputs
    }
}

#[test]
fn custom_arity_mismatch_surfaces_at_backward() {
    let rt = rt();
    let a = leaf(&rt, &[1.0], &[1]);
    let b = leaf(&rt, &[2.0], &[1]);
    let y = apply_custom(Arc::new(WrongArity), &[a, b]).unwrap().remove(0);
    assert!(matches!(
        backward(&y.sum(None).unwrap()).unwrap_err(),
        Error::ArityMismatch { .. }
    ));
}

struct ClampMin;

impl CustomFunction for ClampMin {
    fn forward(&self, ctx: &mut FunctionContext, inputs: &[Tensor]) -> microtorch::Result<Vec<Tensor>> {
        // max(x, m) elementwise via relu(x - m) + m
        let (x, m) = (&inputs[0], &inputs[1]);
        ctx.save_tensor(x);
        ctx.save_tensor(m);
        Ok(vec![x.sub(m)?.relu()?.add(m)?])
    }

    fn backward(
        &self,
        ctx: &BackwardContext<'_>,
        upstream: &[Tensor],
    ) -> microtorch::Result<Vec<Option<Tensor>>> {
        let x = ctx.saved_tensor(0)?;
        let m = ctx.saved_tensor(1)?;
        // pass-through where x > m; explicitly no gradient for the bound
        let mask_src = x.sub(&m)?.relu()?;
        let grad = upstream[0].mul(&mask_src.div(&mask_src.add_scalar(1e-300)?)?)?;
        Ok(vec![Some(grad), None])
    }
}

#[test]
fn custom_no_gradient_marker_leaves_leaf_without_grad() {
    let rt = rt();
    let x = leaf(&rt, &[5.0, -3.0], &[2]);
    let m = leaf(&rt, &[0.0, 0.0], &[2]);
    let y = apply_custom(Arc::new(ClampMin), &[x.clone(), m.clone()])
        .unwrap()
        .remove(0);
    backward(&y.sum(None).unwrap()).unwrap();
    assert!(x.grad().is_some());
    assert!(m.grad().is_none(), "None gradient marker respected");
}

// ---- engine memory and concurrency ------------------------------------------------------

#[test]
fn backward_releases_saved_tensor_references() {
    let rt = rt();
    let x = leaf(&rt, &[1.0, 2.0], &[2]);
    let c = Tensor::from_f64(&rt, &[3.0, 4.0], &[2]).unwrap();
    let before = c.use_count();
    let y = x.mul(&c).unwrap().sum(None).unwrap();
    rt.synchronize();
    assert!(c.use_count() > before, "mul saved its operands");
    backward(&y).unwrap();
    rt.synchronize();
    drop(y);
    assert_eq!(c.use_count(), before, "saved refs released with the graph");
}

#[test]
fn pure_function_memory_returns_to_baseline() {
    let rt = rt();
    let x = leaf(&rt, &[0.5; 64], &[64]);
    rt.synchronize();
    let baseline = rt.allocator().stats().bytes_in_use;
    {
        let y = x.exp().unwrap().mul(&x).unwrap().sum(None).unwrap();
        backward(&y).unwrap();
        rt.synchronize();
        x.clear_grad();
    }
    rt.synchronize();
    assert_eq!(
        rt.allocator().stats().bytes_in_use,
        baseline,
        "graph, intermediates, and grads all released"
    );
}

#[test]
fn concurrent_backwards_on_disjoint_graphs_match_sequential() {
    let rt = rt();
    let run = |seed: u64| {
        let x = Tensor::randn_with(&rt, &[8, 8], seed, DType::F64)
            .unwrap()
            .requiring_grad()
            .unwrap();
        let y = x.matmul(&x).unwrap().sum(None).unwrap();
        backward(&y).unwrap();
        x.grad().unwrap().to_vec_f64().unwrap()
    };
    let sequential: Vec<Vec<f64>> = vec![run(100), run(101)];

    let rt1 = rt.clone();
    let h1 = std::thread::spawn(move || {
        let x = Tensor::randn_with(&rt1, &[8, 8], 100, DType::F64)
            .unwrap()
            .requiring_grad()
            .unwrap();
        let y = x.matmul(&x).unwrap().sum(None).unwrap();
        backward(&y).unwrap();
        x.grad().unwrap().to_vec_f64().unwrap()
    });
    let rt2 = rt.clone();
    let h2 = std::thread::spawn(move || {
        let x = Tensor::randn_with(&rt2, &[8, 8], 101, DType::F64)
            .unwrap()
            .requiring_grad()
            .unwrap();
        let y = x.matmul(&x).unwrap().sum(None).unwrap();
        backward(&y).unwrap();
        x.grad().unwrap().to_vec_f64().unwrap()
    });
    let parallel = vec![h1.join().unwrap(), h2.join().unwrap()];
    assert_eq!(sequential, parallel);
}

// ---- gradcheck -------------------------------------------------------------------------

#[test]
fn gradcheck_matmul_composite() {
    let rt = rt();
    let a = Tensor::randn_with(&rt, &[3, 4], 50, DType::F64).unwrap();
    let b = Tensor::randn_with(&rt, &[4, 2], 51, DType::F64).unwrap();
    let report = gradcheck(
        "matmul",
        &|xs: &[Tensor]| xs[0].matmul(&xs[1])?.sum(None),
        &[a, b],
        GradcheckOptions::default(),
    )
    .unwrap();
    assert!(report.pass, "max rel err {}", report.max_rel_err);
}

#[test]
fn gradcheck_softmax_sum_is_flat() {
    let rt = rt();
    let x = Tensor::randn_with(&rt, &[2, 5], 52, DType::F64).unwrap();
    let report = gradcheck(
        "softmax_sum",
        &|xs: &[Tensor]| xs[0].softmax(1)?.sum(None),
        &[x],
        GradcheckOptions::default(),
    )
    .unwrap();
    // each row of softmax sums to one, so the gradient is ~0 everywhere
    assert!(report.pass, "max rel err {}", report.max_rel_err);
}

#[test]
fn gradcheck_rejects_non_scalar_and_non_f64() {
    let rt = rt();
    let x64 = Tensor::randn_with(&rt, &[2, 2], 1, DType::F64).unwrap();
    let err = gradcheck(
        "id",
        &|xs: &[Tensor]| Ok(xs[0].clone()),
        &[x64.clone()],
        GradcheckOptions::default(),
    )
    .unwrap_err();
    assert!(matches!(err, Error::NonScalarOutput(_)));

    let x32 = Tensor::randn(&rt, &[2, 2], 1).unwrap();
    let err = gradcheck(
        "f32",
        &|xs: &[Tensor]| xs[0].sum(None),
        &[x32],
        GradcheckOptions::default(),
    )
    .unwrap_err();
    assert!(matches!(err, Error::UnsupportedDType { .. }));
}

#[test]
fn relu_gradient_at_exact_zero_is_zero() {
    let rt = rt();
    let x = leaf(&rt, &[-1.0, 0.0, 2.0], &[3]);
    backward(&x.relu().unwrap().sum(None).unwrap()).unwrap();
    assert_eq!(
        x.grad().unwrap().to_vec_f64().unwrap(),
        vec![0.0, 0.0, 1.0],
        "tie at the kink resolves to zero"
    );
}
