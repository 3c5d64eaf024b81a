//! Central finite-difference checks against the tape's reverse pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scenegraph::ggt::{example_total_loss, prepare_examples, GgtConfig, GgtTrainer};
use scenegraph::ranking::PriorMode;
use scenegraph::relation::{
    example_class_weights, gt_examples, sampled_examples, RelationConfig, RelationTrainer, SemanticEmbeddingTable,
    TrainRegime,
};
use scenegraph::synth::{generate_scene, Task, WorldConfig, WorldSpec};
use scenegraph::tensor::nn::causal_mask;
use scenegraph::tensor::{ParamStore, Tape, Tensor, Var};

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;

pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    build: Build,
}

/// `||analytic - numeric|| / max(||analytic||, ||numeric||)`, with an
/// absolute floor so all-zero gradients compare as equal.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(1e-8)
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values in `[-2, -0.1] ∪ [0.1, 2]`, away from the ReLU kink.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = random(rng, shape, 0.1, 2.0);
    t.data_mut().iter_mut().for_each(|v| {
        if rng.random_bool(0.5) {
            *v = -*v
        }
    });
    t
}

/// Reduces any output to a scalar through a fixed random projection so
/// every output entry carries a distinct weight.
fn project(tape: &mut Tape, y: Var, seed: u64) -> Var {
    if tape.value(y).numel() == 1 {
        return y;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.shape(y).to_vec();
    let w = random(&mut rng, &shape, -1.0, 1.0);
    let w = tape.leaf(w);
    let prod = tape.mul(y, w).unwrap();
    tape.sum(prod)
}

fn eval(case: &OpCase, inputs: &[Tensor], with_grad: bool) -> (f64, Vec<Vec<f64>>) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| {
            let t = Tensor::new(t.shape().to_vec(), t.data().to_vec()).unwrap();
            tape.leaf(if with_grad { t.with_grad() } else { t })
        })
        .collect();
    let y = (case.build)(&mut tape, &vars);
    let loss = project(&mut tape, y, 0xC0FFEE);
    let value = tape.value(loss).item();
    if !with_grad {
        return (value, vec![]);
    }
    tape.backward(loss).unwrap();
    let grads = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();
    (value, grads)
}

/// Largest relative error over all inputs of one op instance.
pub fn check_op(case: &OpCase) -> f64 {
    let (_, analytic) = eval(case, &case.inputs, true);
    let mut worst: f64 = 0.0;
    for (k, input) in case.inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.numel()];
        for i in 0..input.numel() {
            let mut plus = case.inputs.clone();
            plus[k].data_mut()[i] += STEP;
            let mut minus = case.inputs.clone();
            minus[k].data_mut()[i] -= STEP;
            numeric[i] = (eval(case, &plus, false).0 - eval(case, &minus, false).0) / (2.0 * STEP);
        }
        worst = worst.max(relative_error(&analytic[k], &numeric));
    }
    worst
}

fn case(name: &'static str, inputs: Vec<Tensor>, build: impl Fn(&mut Tape, &[Var]) -> Var + 'static) -> OpCase {
    OpCase { name, inputs, build: Box::new(build) }
}

/// One random instance of every differentiable op.
pub fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let rows = r.random_range(2..5);
    let cols = r.random_range(2..6);
    let inner = r.random_range(1..5);
    let m = |r: &mut ChaCha8Rng, s: &[usize]| random(r, s, -1.5, 1.5);
    let mask: Vec<bool> = (0..rows * cols).map(|k| k % cols == 0 || r.random_bool(0.6)).collect();
    let bce_mask: Vec<bool> = (0..rows * cols).map(|_| r.random_bool(0.7)).collect();
    let bce_targets: Vec<f64> = (0..rows * cols).map(|_| f64::from(u8::from(r.random_bool(0.5)))).collect();
    let ce_targets: Vec<usize> = (0..rows).map(|_| r.random_range(0..cols)).collect();
    let ce_weights: Vec<f64> = (0..rows).map(|_| r.random_range(0.2..3.0)).collect();
    let indices: Vec<usize> = (0..rows + 1).map(|_| r.random_range(0..cols)).collect();
    let start = r.random_range(0..cols);
    let len = r.random_range(1..=cols - start);
    let factor = r.random_range(-2.0..2.0);
    vec![
        case("matmul", vec![m(&mut r, &[rows, inner]), m(&mut r, &[inner, cols])], |t, v| {
            t.matmul(v[0], v[1]).unwrap()
        }),
        case("add", vec![m(&mut r, &[rows, cols]), m(&mut r, &[rows, cols])], |t, v| t.add(v[0], v[1]).unwrap()),
        case("sub", vec![m(&mut r, &[rows, cols]), m(&mut r, &[rows, cols])], |t, v| t.sub(v[0], v[1]).unwrap()),
        case("add_row", vec![m(&mut r, &[rows, cols]), m(&mut r, &[cols])], |t, v| t.add_row(v[0], v[1]).unwrap()),
        case("mul", vec![m(&mut r, &[rows, cols]), m(&mut r, &[rows, cols])], |t, v| t.mul(v[0], v[1]).unwrap()),
        case("scale", vec![m(&mut r, &[rows, cols])], move |t, v| t.scale(v[0], factor)),
        case("concat_rows", vec![m(&mut r, &[rows, cols]), m(&mut r, &[inner, cols])], |t, v| {
            t.concat(&[v[0], v[1]], 0).unwrap()
        }),
        case("concat_cols", vec![m(&mut r, &[rows, cols]), m(&mut r, &[rows, inner])], |t, v| {
            t.concat(&[v[0], v[1]], 1).unwrap()
        }),
        case("relu", vec![off_zero(&mut r, &[rows, cols])], |t, v| t.relu(v[0])),
        case("sigmoid", vec![m(&mut r, &[rows, cols])], |t, v| t.sigmoid(v[0])),
        case("softmax_rows", vec![m(&mut r, &[rows, cols])], |t, v| t.softmax(v[0], 1).unwrap()),
        case("softmax_cols", vec![m(&mut r, &[rows, cols])], |t, v| t.softmax(v[0], 0).unwrap()),
        case("masked_softmax", vec![m(&mut r, &[rows, cols])], move |t, v| {
            t.masked_softmax(v[0], 1, Some(mask.clone())).unwrap()
        }),
        case("layer_norm", vec![m(&mut r, &[rows, cols]), m(&mut r, &[cols]), m(&mut r, &[cols])], |t, v| {
            t.layer_norm(v[0], v[1], v[2]).unwrap()
        }),
        case("embedding_lookup", vec![m(&mut r, &[cols, inner])], move |t, v| {
            t.embedding_lookup(v[0], &indices).unwrap()
        }),
        case("transpose", vec![m(&mut r, &[rows, cols])], |t, v| t.transpose(v[0]).unwrap()),
        case("slice_cols", vec![m(&mut r, &[rows, cols])], move |t, v| t.slice_cols(v[0], start, len).unwrap()),
        case("reshape", vec![m(&mut r, &[rows, cols])], move |t, v| t.reshape(v[0], vec![cols, rows]).unwrap()),
        case("sum", vec![m(&mut r, &[rows, cols])], |t, v| t.sum(v[0])),
        case("mean", vec![m(&mut r, &[rows, cols])], |t, v| t.mean(v[0])),
        case("linear", vec![m(&mut r, &[rows, inner]), m(&mut r, &[inner, cols]), m(&mut r, &[cols])], |t, v| {
            t.linear(v[0], v[1], Some(v[2])).unwrap()
        }),
        case(
            "causal_attention",
            vec![m(&mut r, &[rows, inner]), m(&mut r, &[rows, inner]), m(&mut r, &[rows, cols])],
            move |t, v| t.scaled_dot_product_attention(v[0], v[1], v[2], Some(causal_mask(rows))).unwrap().0,
        ),
        case("bce", vec![random(&mut r, &[rows, cols], 0.05, 0.95)], move |t, v| {
            t.bce(v[0], &bce_targets, Some(bce_mask.clone())).unwrap()
        }),
        case("weighted_ce", vec![random(&mut r, &[rows, cols], 0.05, 1.0)], move |t, v| {
            t.weighted_ce(v[0], &ce_targets, &ce_weights).unwrap()
        }),
    ]
}

fn small_world() -> WorldSpec {
    WorldSpec::build(WorldConfig { num_entity_classes: 6, num_predicates: 4, feature_dim: 6, ..WorldConfig::default() })
        .unwrap()
}

/// Relative error of d(loss)/d(params) over every parameter scalar.
/// Parameters named in `frozen` are skipped: the model reads them as
/// constants, so they carry no analytic gradient.
fn check_store(
    store: &mut ParamStore,
    frozen: &[&str],
    loss: &mut dyn FnMut(&ParamStore, bool) -> (f64, Option<Vec<Vec<f64>>>),
) -> f64 {
    let (_, analytic) = loss(store, true);
    let analytic = analytic.unwrap();
    let ids: Vec<_> = store.ids().collect();
    let mut a_all = Vec::new();
    let mut n_all = Vec::new();
    for (k, id) in ids.iter().enumerate() {
        if frozen.contains(&store.name(*id)) {
            continue;
        }
        let base = store.get(*id).data().to_vec();
        for i in 0..base.len() {
            let mut p = base.clone();
            p[i] += STEP;
            store.set_data(*id, &p).unwrap();
            let up = loss(store, false).0;
            p[i] = base[i] - STEP;
            store.set_data(*id, &p).unwrap();
            let down = loss(store, false).0;
            store.set_data(*id, &base).unwrap();
            n_all.push((up - down) / (2.0 * STEP));
        }
        a_all.extend_from_slice(&analytic[k]);
    }
    relative_error(&a_all, &n_all)
}

fn store_grads(store: &ParamStore) -> Vec<Vec<f64>> {
    store.iter().map(|(_, _, t)| t.grad().map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec)).collect()
}

/// Full decoder loss gradients, one instance per scene seed.
pub fn ggt_model_errors(seeds: &[u64]) -> Vec<f64> {
    let spec = small_world();
    let cfg = GgtConfig { hidden_dim: 8, num_heads: 2, num_layers: 2, ff_dim: 8, max_nodes: 6, ..GgtConfig::default() };
    seeds
        .iter()
        .map(|&s| {
            let scene = generate_scene(&spec, 1000 + s);
            let ex = prepare_examples(&[scene], &spec, Task::SgDet, cfg.max_nodes).remove(0);
            let mut trainer = GgtTrainer::new(cfg.clone(), spec.num_classes(), spec.feature_dim(), s).unwrap();
            let model = &mut trainer.model;
            let mut store = std::mem::take(&mut model.store);
            let err = check_store(&mut store, &[], &mut |st: &ParamStore, grad: bool| {
                let mut m = model.clone();
                m.store = st.clone();
                let mut tape = Tape::new();
                let l = example_total_loss(&m, &mut tape, &ex).unwrap();
                let v = tape.value(l).item();
                if !grad {
                    return (v, None);
                }
                tape.backward(l).unwrap();
                m.store.zero_grad();
                m.store.accumulate_grads(&tape);
                (v, Some(store_grads(&m.store)))
            });
            err
        })
        .collect()
}

/// Full relation-model loss gradients. Odd seeds train on sampled graphs
/// with a background class, even seeds on ground-truth edges.
pub fn relation_model_errors(seeds: &[u64]) -> Vec<f64> {
    let spec = small_world();
    seeds
        .iter()
        .map(|&s| {
            let scenes: Vec<_> = (0..4).map(|i| generate_scene(&spec, 2000 + 10 * s + i)).collect();
            let sampled = s % 2 == 1;
            let cfg = RelationConfig {
                hidden_dim: 8,
                num_heads: 2,
                ff_dim: 8,
                embedding_dim: 4,
                context_vectors: 2,
                trainable_embeddings: s % 3 == 0,
                regime: if sampled { TrainRegime::Sampled } else { TrainRegime::GtGraphs },
                ..RelationConfig::default()
            };
            let examples = if sampled {
                let ggt = GgtTrainer::new(
                    GgtConfig { hidden_dim: 8, num_heads: 2, ff_dim: 8, ..GgtConfig::default() },
                    spec.num_classes(),
                    spec.feature_dim(),
                    s,
                )
                .unwrap()
                .model;
                sampled_examples(&scenes, &spec, &ggt, 30, PriorMode::Product).unwrap()
            } else {
                gt_examples(&scenes, &spec, Task::SgCls)
            };
            let ex = examples.into_iter().max_by_key(|e| e.edges.len()).unwrap();
            let table =
                SemanticEmbeddingTable::from_cooccurrence(&scenes, spec.num_classes(), spec.num_predicates(), 4, s);
            let outputs = spec.num_predicates() + usize::from(sampled);
            let mut weights = example_class_weights(std::slice::from_ref(&ex), outputs).unwrap();
            weights.iter_mut().enumerate().for_each(|(i, w)| *w *= 1.0 + 0.1 * i as f64);
            let frozen: &[&str] = if cfg.trainable_embeddings { &[] } else { &["semantic_table"] };
            let mut tr =
                RelationTrainer::new(cfg, spec.num_predicates(), spec.feature_dim(), &table, weights, s).unwrap();
            let mut store = std::mem::take(&mut tr.model.store);
            check_store(&mut store, frozen, &mut |st: &ParamStore, grad: bool| {
                let mut t = tr.clone();
                t.model.store = st.clone();
                let mut tape = Tape::new();
                let (l, _) = t.example_loss(&mut tape, &ex, None).unwrap();
                let v = tape.value(l).item();
                if !grad {
                    return (v, None);
                }
                tape.backward(l).unwrap();
                t.model.store.zero_grad();
                t.model.store.accumulate_grads(&tape);
                (v, Some(store_grads(&t.model.store)))
            })
        })
        .collect()
}
