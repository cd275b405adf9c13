use atd_core::atd::{alternate_fuse, AtdConfig};
use atd_core::gradcheck::{grad_check, grad_check_inputs, DEFAULT_STEP};
use atd_core::gradsuite::{run_suite, COMPONENTS, TOLERANCE};
use atd_core::graph::{with_backward_fault, Graph, OpKind, Var};
use atd_core::params::ParamStore;
use atd_core::{Fill, Result, Rng, Tensor};

const OP_TOLERANCE: f64 = 1e-6;

fn uniform(rng: &mut Rng, shape: &[usize]) -> Tensor {
    Tensor::create(shape, Fill::Uniform { rng, lo: -1.0, hi: 1.0 }).unwrap()
}

fn probe_loss(g: &mut Graph, out: Var, probe: &Tensor) -> Result<Var> {
    let p = g.constant(probe.reshaped(g.shape(out))?);
    let m = g.mul(out, p)?;
    Ok(g.sum(m))
}

type OpFn = fn(&mut Graph, &[Var]) -> Result<Var>;

/// Each op with the input shapes it is checked at.
fn op_cases() -> Vec<(&'static str, Vec<Vec<usize>>, OpFn)> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], |g, v| g.matmul(v[0], v[1])),
        ("matvec", vec![vec![3, 4], vec![4, 1]], |g, v| g.matmul(v[0], v[1])),
        ("add", vec![vec![2, 3], vec![2, 3]], |g, v| g.add(v[0], v[1])),
        ("sub", vec![vec![2, 3], vec![2, 3]], |g, v| g.sub(v[0], v[1])),
        ("mul", vec![vec![2, 3], vec![2, 3]], |g, v| g.mul(v[0], v[1])),
        ("scale", vec![vec![5]], |g, v| Ok(g.scale(v[0], -1.7))),
        ("shift", vec![vec![5]], |g, v| Ok(g.shift(v[0], 0.3))),
        ("tanh", vec![vec![2, 3]], |g, v| Ok(g.tanh(v[0]))),
        ("sigmoid", vec![vec![2, 3]], |g, v| Ok(g.sigmoid(v[0]))),
        ("softmax_rows", vec![vec![3, 4]], |g, v| g.softmax_rows(v[0])),
        ("sum", vec![vec![2, 3]], |g, v| {
            let t = g.tanh(v[0]);
            Ok(g.sum(t))
        }),
        ("mean", vec![vec![2, 3]], |g, v| {
            let t = g.tanh(v[0]);
            Ok(g.mean(t))
        }),
        ("transpose", vec![vec![2, 3]], |g, v| g.transpose(v[0])),
        ("reshape", vec![vec![2, 3]], |g, v| g.reshape(v[0], &[3, 2])),
        ("concat", vec![vec![3], vec![2]], |g, v| g.concat(&[v[0], v[1]])),
        ("add_row_bias", vec![vec![3, 2], vec![2]], |g, v| g.add_row_bias(v[0], v[1])),
        ("mul_scalar", vec![vec![2, 3], vec![1]], |g, v| g.mul_scalar(v[0], v[1])),
        ("normalize_rows", vec![vec![3, 5]], |g, v| g.normalize_rows(v[0], 1e-5)),
        ("sub_row_max", vec![vec![3, 4]], |g, v| g.sub_row_max(v[0])),
        ("row_means", vec![vec![3, 4]], |g, v| g.row_means(v[0])),
        ("conv2d", vec![vec![2, 5, 5], vec![3, 2, 3, 3], vec![3]], |g, v| g.conv2d(v[0], v[1], v[2], 2, 1)),
        ("conv2d_same", vec![vec![2, 4, 4], vec![2, 2, 3, 3], vec![2]], |g, v| g.conv2d(v[0], v[1], v[2], 1, 1)),
        ("cross_entropy", vec![vec![4]], |g, v| g.cross_entropy(v[0], 2)),
    ]
}

#[test]
fn every_op_matches_central_differences() {
    for (name, shapes, op) in op_cases() {
        for seed in 0..10 {
            let mut rng = Rng::new(seed);
            let inputs: Vec<Tensor> = shapes.iter().map(|s| uniform(&mut rng, s)).collect();
            let probe = {
                let mut g = Graph::new();
                let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
                let out = op(&mut g, &vars).unwrap();
                let n = g.value(out).len();
                uniform(&mut rng, &[n])
            };
            let errors = grad_check_inputs(
                |g, vars| {
                    let out = op(g, vars)?;
                    probe_loss(g, out, &probe)
                },
                &inputs,
                DEFAULT_STEP,
            )
            .unwrap();
            for (k, e) in errors.iter().enumerate() {
                assert!(*e < OP_TOLERANCE, "{name} input {k} seed {seed}: {e:e}");
            }
        }
    }
}

#[test]
fn fusion_gradients_cover_params_and_inputs() {
    for d in [2, 4, 8] {
        let cfg = AtdConfig { d, d_h: d, rounds: 2, epsilon: 1e-5 };
        let mut rng = Rng::new(d as u64);
        let mut store = ParamStore::new();
        cfg.init(&mut store, "atd", &mut rng).unwrap();
        for (_, t) in store.iter_mut() {
            for v in t.data_mut() {
                *v += rng.uniform(-0.2, 0.2);
            }
        }
        let x1 = uniform(&mut rng, &[3, d]);
        let x2 = uniform(&mut rng, &[3, d]);
        let probe = uniform(&mut rng, &[3 * d]);

        let run = |g: &mut Graph, store: &ParamStore, a: Var, b: Var| {
            let bound = store.bind(g);
            let p = cfg.bind(g, &bound, "atd")?;
            let z = alternate_fuse(g, a, b, &p)?;
            probe_loss(g, z, &probe)
        };

        let input_errors = grad_check_inputs(
            |g, v| run(g, &store, v[0], v[1]),
            &[x1.clone(), x2.clone()],
            DEFAULT_STEP,
        )
        .unwrap();
        for (k, e) in input_errors.iter().enumerate() {
            assert!(*e < TOLERANCE, "d={d} input {k}: {e:e}");
        }

        let names: Vec<String> = store.names().map(str::to_string).collect();
        for name in &names {
            let err = grad_check(
                |g, x| {
                    let mut bound = store.bind(g);
                    bound.set(name, x)?;
                    let p = cfg.bind(g, &bound, "atd")?;
                    let a = g.constant(x1.clone());
                    let b = g.constant(x2.clone());
                    let z = alternate_fuse(g, a, b, &p)?;
                    probe_loss(g, z, &probe)
                },
                store.get(name).unwrap(),
                DEFAULT_STEP,
            )
            .unwrap();
            assert!(err < TOLERANCE, "d={d} param {name}: {err:e}");
        }
    }
}

#[test]
fn component_suite_passes_for_several_seeds() {
    for seed in 0..3 {
        let checks = run_suite(seed).unwrap();
        assert_eq!(checks.len(), COMPONENTS.len());
        for c in &checks {
            assert!(c.passed(), "seed {seed}: {} at {:e}", c.component, c.max_rel_error);
        }
    }
}

fn failing_under_fault(kind: OpKind) -> Vec<&'static str> {
    with_backward_fault(kind, || run_suite(0))
        .unwrap()
        .into_iter()
        .filter(|c| !c.passed())
        .map(|c| c.component)
        .collect()
}

#[test]
fn suite_detects_corrupted_backward_rules() {
    assert!(failing_under_fault(OpKind::Conv2d).contains(&"conv2d"));
    assert!(failing_under_fault(OpKind::SoftmaxRows).contains(&"guidance_weights_integrate"));
    assert!(failing_under_fault(OpKind::NormalizeRows).contains(&"normalize"));
    for kind in [
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Mul,
        OpKind::Tanh,
        OpKind::Sigmoid,
        OpKind::SubRowMax,
        OpKind::AddRowBias,
        OpKind::MulScalar,
        OpKind::RowMeans,
        OpKind::Concat,
        OpKind::CrossEntropy,
    ] {
        assert!(!failing_under_fault(kind).is_empty(), "{} corruption went unnoticed", kind.name());
    }
}

#[test]
fn fault_is_scoped_to_the_closure() {
    let _ = failing_under_fault(OpKind::Tanh);
    assert!(run_suite(0).unwrap().iter().all(|c| c.passed()));
}
