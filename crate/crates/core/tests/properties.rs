//! Property tests: aliasing against an eager-copy oracle, version
//! monotonicity, and mutation safety of the autograd tape.

use microtorch::autograd::backward;
use microtorch::dtype::DType;
use microtorch::error::Error;
use microtorch::rng::Xoshiro256StarStar;
use microtorch::tensor::Tensor;
use microtorch::Runtime;
use proptest::prelude::*;

// ---- aliasing ---------------------------------------------------------------

/// Independent model of a strided view: plain index arithmetic over a flat
/// value vector.
#[derive(Clone, Debug)]
struct ModelView {
    offset: usize,
    shape: Vec<usize>,
    strides: Vec<isize>,
}

impl ModelView {
    fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    fn linear_indices(&self) -> Vec<usize> {
        let n = self.numel();
        let mut out = Vec::with_capacity(n);
        for flat in 0..n {
            let mut rem = flat;
            let mut idx = self.offset as isize;
            for d in (0..self.shape.len()).rev() {
                let i = rem % self.shape[d];
                rem /= self.shape[d];
                idx += i as isize * self.strides[d];
            }
            out.push(idx as usize);
        }
        out
    }
}

#[derive(Clone, Debug)]
enum ViewProgramStep {
    Transpose { view: usize, d0: usize, d1: usize },
    Slice { view: usize, axis: usize, lo: f32, hi: f32 },
    Reshape { view: usize },
    WriteAdd { view: usize, value: i32 },
}

fn view_step() -> impl Strategy<Value = ViewProgramStep> {
    prop_oneof![
        (any::<prop::sample::Index>(), 0usize..4, 0usize..4)
            .prop_map(|(v, d0, d1)| ViewProgramStep::Transpose { view: v.index(64), d0, d1 }),
        (any::<prop::sample::Index>(), 0usize..4, 0.0f32..1.0, 0.0f32..1.0)
            .prop_map(|(v, axis, lo, hi)| ViewProgramStep::Slice { view: v.index(64), axis, lo, hi }),
        any::<prop::sample::Index>().prop_map(|v| ViewProgramStep::Reshape { view: v.index(64) }),
        (any::<prop::sample::Index>(), -50i32..50)
            .prop_map(|(v, value)| ViewProgramStep::WriteAdd { view: v.index(64), value }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    /// Writing through any view and reading through any other agrees with
    /// an oracle that models views as plain index arithmetic.
    #[test]
    fn aliasing_matches_index_arithmetic_oracle(steps in proptest::collection::vec(view_step(), 1..24)) {
        let rt = Runtime::new();
        let n = 24usize;
        let base_data: Vec<f32> = (0..n).map(|i| i as f32).collect();
        let base = Tensor::from_f32(&rt, &base_data, &[4, 6]).unwrap();
        let mut model: Vec<f32> = base_data;
        let mut views = vec![base.clone()];
        let mut model_views = vec![ModelView { offset: 0, shape: vec![4, 6], strides: vec![6, 1] }];

        for step in steps {
            match step {
                ViewProgramStep::Transpose { view, d0, d1 } => {
                    let v = view % views.len();
                    let t = &views[v];
                    let rank = t.rank();
                    if rank == 0 { continue; }
                    let (d0, d1) = (d0 % rank, d1 % rank);
                    let new = t.transpose(d0, d1).unwrap();
                    let mut mv = model_views[v].clone();
                    mv.shape.swap(d0, d1);
                    mv.strides.swap(d0, d1);
                    views.push(new);
                    model_views.push(mv);
                }
                ViewProgramStep::Slice { view, axis, lo, hi } => {
                    let v = view % views.len();
                    let t = &views[v];
                    if t.rank() == 0 { continue; }
                    let axis = axis % t.rank();
                    let extent = t.shape()[axis];
                    let a = ((lo * extent as f32) as usize).min(extent);
                    let b = ((hi * extent as f32) as usize).clamp(a, extent);
                    let new = t.slice(axis, a, b).unwrap();
                    let mut mv = model_views[v].clone();
                    mv.offset = (mv.offset as isize + a as isize * mv.strides[axis]) as usize;
                    mv.shape[axis] = b - a;
                    views.push(new);
                    model_views.push(mv);
                }
                ViewProgramStep::Reshape { view } => {
                    let v = view % views.len();
                    let t = &views[v];
                    if !t.is_contiguous() { continue; }
                    let new_shape = vec![t.numel()];
                    let new = t.reshape(&new_shape).unwrap();
                    let mv = ModelView {
                        offset: model_views[v].offset,
                        shape: new_shape,
                        strides: vec![1],
                    };
                    views.push(new);
                    model_views.push(mv);
                }
                ViewProgramStep::WriteAdd { view, value } => {
                    let v = view % views.len();
                    let mut t = views[v].clone();
                    t.add_scalar_(value as f64).unwrap();
                    for idx in model_views[v].linear_indices() {
                        model[idx] += value as f32;
                    }
                }
            }
        }

        rt.synchronize();
        for (t, mv) in views.iter().zip(&model_views) {
            let got = t.to_vec_f32().unwrap();
            let want: Vec<f32> = mv.linear_indices().iter().map(|&i| model[i]).collect();
            prop_assert_eq!(got, want);
        }
    }

    /// storage.version counts completed in-place ops exactly, regardless of
    /// interleaved out-of-place work.
    #[test]
    fn version_counts_inplace_ops(ops in proptest::collection::vec(any::<(bool, u8)>(), 0..40)) {
        let rt = Runtime::new();
        let base = Tensor::from_f32(&rt, &[1.0; 12], &[3, 4]).unwrap();
        let view = base.transpose(0, 1).unwrap();
        let mut inplace_count = 0u64;
        for (inplace, sel) in ops {
            if inplace {
                // alternate between the base and a view of it
                if sel % 2 == 0 {
                    let mut t = base.clone();
                    t.add_scalar_(1.0).unwrap();
                } else {
                    let mut t = view.clone();
                    t.mul_scalar_(1.5).unwrap();
                }
                inplace_count += 1;
            } else {
                let _fresh = base.add_scalar(2.0).unwrap(); // out of place
            }
            prop_assert_eq!(base.version(), inplace_count);
            prop_assert_eq!(view.version(), inplace_count, "one counter per storage");
        }
    }
}

// ---- mutation safety ----------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
enum ProgOp {
    Add(usize),
    Sub(usize),
    Mul(usize),
    Matmul(usize),
    Relu,
    Neg,
}

/// A random straight-line program over 4x4 tensors. Returns the loss and
/// the list of tensors each op saved on the tape (by pool slot).
struct Program {
    ops: Vec<ProgOp>,
}

impl Program {
    fn random(rng: &mut Xoshiro256StarStar, len: usize) -> Program {
        let ops = (0..len)
            .map(|_| match rng.next_below(6) {
                0 => ProgOp::Add(rng.next_below(4) as usize),
                1 => ProgOp::Sub(rng.next_below(4) as usize),
                2 => ProgOp::Mul(rng.next_below(4) as usize),
                3 => ProgOp::Matmul(rng.next_below(4) as usize),
                4 => ProgOp::Relu,
                _ => ProgOp::Neg,
            })
            .collect();
        Program { ops }
    }

    /// Run the program. `pool` holds the non-grad operand tensors. Returns
    /// (loss, saved_slots): which pool slots were version-pinned by some
    /// node, and the chain intermediates that were saved.
    fn run(
        &self,
        params: &[Tensor],
        pool: &[Tensor],
    ) -> microtorch::Result<(Tensor, Vec<usize>, Vec<Tensor>)> {
        let mut saved_slots = Vec::new();
        let mut saved_intermediates = Vec::new();
        // chain starts from the product of the two params so every op is on
        // the gradient path
        let mut t = params[0].mul(&params[1])?;
        for op in &self.ops {
            t = match *op {
                ProgOp::Add(i) => t.add(&pool[i])?,
                ProgOp::Sub(i) => t.sub(&pool[i])?,
                ProgOp::Mul(i) => {
                    saved_slots.push(i);
                    saved_intermediates.push(t.clone());
                    t.mul(&pool[i])?
                }
                ProgOp::Matmul(i) => {
                    saved_slots.push(i);
                    saved_intermediates.push(t.clone());
                    t.matmul(&pool[i])?
                }
                ProgOp::Relu => {
                    saved_intermediates.push(t.clone());
                    t.relu()?
                }
                ProgOp::Neg => t.neg()?,
            };
        }
        Ok((t.sum(None)?, saved_slots, saved_intermediates))
    }
}

fn grads_of(params: &[Tensor]) -> Vec<Vec<f64>> {
    params
        .iter()
        .map(|p| p.grad().unwrap().to_vec_f64().unwrap())
        .collect()
}

/// Mutating any version-pinned tensor between forward and backward raises
/// VersionMismatch -- never a silently wrong gradient. 1000 randomized
/// programs.
#[test]
fn mutating_saved_tensors_always_raises_version_mismatch() {
    let rt = Runtime::new();
    let mut rng = Xoshiro256StarStar::new(0xA8);
    let mut checked = 0;
    for case in 0..1000 {
        let params: Vec<Tensor> = (0..2)
            .map(|i| {
                Tensor::randn_with(&rt, &[4, 4], 1000 + case * 7 + i, DType::F64)
                    .unwrap()
                    .requiring_grad()
                    .unwrap()
            })
            .collect();
        let pool: Vec<Tensor> = (0..4)
            .map(|i| Tensor::randn_with(&rt, &[4, 4], 2000 + case * 13 + i, DType::F64).unwrap())
            .collect();
        let program = Program::random(&mut rng, 3 + (case % 5) as usize);
        let (loss, saved_slots, saved_intermediates) = program.run(&params, &pool).unwrap();

        // pick a mutation target that some node saved
        let n_targets = saved_slots.len() + saved_intermediates.len();
        if n_targets == 0 {
            // nothing saved (pure add/sub/neg chain): backward must succeed
            backward(&loss).unwrap();
            continue;
        }
        checked += 1;
        let pick = rng.next_below(n_targets as u64) as usize;
        if pick < saved_slots.len() {
            let mut victim = pool[saved_slots[pick]].clone();
            victim.add_scalar_(1.0).unwrap();
        } else {
            let mut victim = saved_intermediates[pick - saved_slots.len()].clone();
            victim.add_scalar_(1.0).unwrap();
        }
        match backward(&loss) {
            Err(Error::VersionMismatch { .. }) => {}
            other => panic!("case {case}: expected VersionMismatch, got {other:?}"),
        }
    }
    assert!(checked >= 800, "only {checked} cases exercised a saved tensor");
}

/// The same random programs with mutations replaced by out-of-place ops
/// produce gradients identical to a pure (copying) replay.
#[test]
fn out_of_place_replacements_match_copying_oracle() {
    let rt = Runtime::new();
    let mut rng = Xoshiro256StarStar::new(0xB8);
    for case in 0..200 {
        let make_params = || -> Vec<Tensor> {
            (0..2)
                .map(|i| {
                    Tensor::randn_with(&rt, &[4, 4], 5000 + case * 7 + i, DType::F64)
                        .unwrap()
                        .requiring_grad()
                        .unwrap()
                })
                .collect()
        };
        let pool: Vec<Tensor> = (0..4)
            .map(|i| Tensor::randn_with(&rt, &[4, 4], 6000 + case * 13 + i, DType::F64).unwrap())
            .collect();
        let program = Program::random(&mut rng, 3 + (case % 5) as usize);

        // engine run with in-place mutations of a pool tensor mid-program,
        // applied where legal (the slot is cloned first so saved handles
        // keep their version: this mirrors "replaced by out-of-place ops")
        let params_a = make_params();
        let mut pool_a: Vec<Tensor> = pool.clone();
        // mutate-by-replacement before the program runs: fresh tensors
        let slot = (case % 4) as usize;
        pool_a[slot] = pool_a[slot].add_scalar(1.0).unwrap();
        let (loss_a, _, _) = program.run(&params_a, &pool_a).unwrap();
        backward(&loss_a).unwrap();
        let got = grads_of(&params_a);

        // pure copying oracle: same values built from scratch
        let params_b = make_params();
        let mut pool_b: Vec<Tensor> = pool.clone();
        pool_b[slot] = pool_b[slot].add_scalar(1.0).unwrap();
        let (loss_b, _, _) = program.run(&params_b, &pool_b).unwrap();
        backward(&loss_b).unwrap();
        let want = grads_of(&params_b);

        assert_eq!(got, want, "case {case}: gradients must match exactly");
    }
}
