//! Central finite-difference checks of every tape op, both losses and the
//! full model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ssept::autodiff::{Graph, NodeId};
use ssept::model::{bind, Dropout, ModelConfig, ModelParams};
use ssept::regularization::SseExample;
use ssept::training::{batch_loss, bce_loss, bpr_loss, Example, LossKind};
use ssept::Tensor;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(1e-6)
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
}

/// Builds `sum(out · R)` for a fixed random `R`, so every output entry
/// contributes with a distinct weight.
fn project(g: &mut Graph<'_>, out: NodeId, seed: u64) -> NodeId {
    let (r, c) = {
        let v = g.value(out);
        (v.rows(), v.cols())
    };
    let out = if g.value(out).shape().len() == 2 {
        out
    } else {
        g.reshape(out, vec![r, c]).unwrap()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(random(&[c, 1], &mut rng));
    let m = g.matmul(out, w).unwrap();
    g.sum(m)
}

/// Compares tape gradients of `build` against central differences for every
/// entry of every input.
fn check<F>(name: &str, inputs: &[Tensor], build: F)
where
    F: Fn(&mut Graph<'_>, &[NodeId]) -> NodeId,
{
    let eval = |values: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = values.iter().map(|t| g.param_owned(t.clone())).collect();
        let out = build(&mut g, &ids);
        let loss = project(&mut g, out, 99);
        g.value(loss).data()[0]
    };
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.param_owned(t.clone())).collect();
    let out = build(&mut g, &ids);
    let loss = project(&mut g, out, 99);
    let grads = g.backward(loss).unwrap();

    let mut values = inputs.to_vec();
    for (k, id) in ids.iter().enumerate() {
        let analytic = grads.get(*id).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()).unwrap());
        for j in 0..values[k].numel() {
            let orig = values[k].data()[j];
            values[k].data_mut()[j] = orig + STEP;
            let up = eval(&values);
            values[k].data_mut()[j] = orig - STEP;
            let down = eval(&values);
            values[k].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let a = analytic.data()[j];
            assert!(
                relative_error(a, numeric) <= TOL,
                "{name}: input {k} entry {j}: tape {a} vs numeric {numeric}"
            );
        }
    }
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(2024)
}

#[test]
fn matmul_and_transpose() {
    let mut r = rng();
    let ins = [random(&[3, 4], &mut r), random(&[4, 2], &mut r)];
    check("matmul", &ins, |g, x| g.matmul(x[0], x[1]).unwrap());
    check("transpose", &ins[..1], |g, x| g.transpose(x[0]).unwrap());
}

#[test]
fn add_add_row_and_scale() {
    let mut r = rng();
    let ins = [random(&[3, 4], &mut r), random(&[3, 4], &mut r), random(&[1, 4], &mut r)];
    check("add", &ins[..2], |g, x| g.add(x[0], x[1]).unwrap());
    check("add_row", &[ins[0].clone(), ins[2].clone()], |g, x| g.add_row(x[0], x[1]).unwrap());
    check("scale", &ins[..1], |g, x| g.scale(x[0], -0.7));
}

#[test]
fn elementwise_nonlinearities() {
    let mut r = rng();
    // keep relu inputs away from its kink
    let mut x = random(&[4, 3], &mut r);
    for v in x.data_mut() {
        if v.abs() < 0.05 {
            *v += 0.2;
        }
    }
    check("relu", &[x.clone()], |g, x| g.relu(x[0]));
    check("sigmoid", &[x.clone()], |g, x| g.sigmoid(x[0]));
    check("log_sigmoid", &[x], |g, x| g.log_sigmoid(x[0]));
}

#[test]
fn masked_softmax_and_layer_norm() {
    let mut r = rng();
    let s = random(&[5, 5], &mut r);
    check("masked_softmax", &[s], |g, x| g.masked_softmax(x[0]).unwrap());
    let ins = [random(&[4, 6], &mut r), random(&[1, 6], &mut r), random(&[1, 6], &mut r)];
    check("layer_norm", &ins, |g, x| g.layer_norm(x[0], x[1], x[2]).unwrap());
}

#[test]
fn dropout_gather_concat_and_reshape() {
    let mut r = rng();
    let a = random(&[4, 3], &mut r);
    let b = random(&[4, 2], &mut r);
    let c = random(&[2, 3], &mut r);
    let mask = vec![2.0, 0.0, 2.0, 2.0, 2.0, 0.0, 0.0, 2.0, 2.0, 2.0, 0.0, 2.0];
    check("dropout", &[a.clone()], |g, x| g.dropout_apply(x[0], mask.clone()).unwrap());
    check("gather", &[a.clone()], |g, x| g.gather(x[0], vec![3, 0, 3, 1]).unwrap());
    check("concat_cols", &[a.clone(), b], |g, x| g.concat_cols(x[0], x[1]).unwrap());
    check("concat_rows", &[a.clone(), c], |g, x| g.concat_rows(vec![x[0], x[1]]).unwrap());
    check("reshape", &[a], |g, x| g.reshape(x[0], vec![2, 6]).unwrap());
}

#[test]
fn row_dot_and_sum() {
    let mut r = rng();
    let ins = [random(&[5, 3], &mut r), random(&[5, 3], &mut r)];
    check("row_dot", &ins, |g, x| g.row_dot(x[0], x[1]).unwrap());
    check("sum", &ins[..1], |g, x| g.sum(x[0]));
}

#[test]
fn both_losses() {
    let mut r = rng();
    let ins = [random(&[4, 1], &mut r), random(&[4, 3], &mut r)];
    let mask = [true, false, true, true];
    check("bce", &ins, |g, x| bce_loss(g, x[0], x[1], &mask).unwrap().node);
    check("bpr", &ins, |g, x| bpr_loss(g, x[0], x[1], &mask).unwrap().node);
}

fn tiny_model(d_user: usize) -> (ModelConfig, ModelParams) {
    let cfg = ModelConfig {
        n_users: 3,
        n_items: 5,
        d_user,
        d_item: 2,
        max_len: 4,
        blocks: 1,
        dropout: 0.0,
    };
    let params = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(17)).unwrap();
    (cfg, params)
}

fn tiny_batch() -> Vec<Example> {
    vec![
        Example {
            steps: vec![2, 3],
            indices: SseExample {
                user: 1,
                inputs: vec![0, 0, 3, 1],
                targets: vec![1, 4],
                negatives: vec![5, 2],
            },
        },
        Example {
            steps: vec![1, 2, 3],
            indices: SseExample {
                user: 3,
                inputs: vec![0, 2, 5, 4],
                targets: vec![5, 4, 3],
                negatives: vec![1, 1, 2],
            },
        },
    ]
}

fn model_loss(params: &ModelParams, batch: &[Example], kind: LossKind) -> f64 {
    let mut g = Graph::new();
    let bound = bind(&mut g, params, false);
    let mut none: Option<Dropout<'_, ChaCha8Rng>> = None;
    let l = batch_loss(&mut g, &bound, batch, kind, &mut none).unwrap();
    g.value(l.node).data()[0]
}

#[test]
fn full_model_matches_finite_differences() {
    for (d_user, kind) in [(2, LossKind::Bce), (0, LossKind::Bce), (2, LossKind::Bpr)] {
        let (_, params) = tiny_model(d_user);
        let batch = tiny_batch();
        let grads = {
            let mut g = Graph::new();
            let bound = bind(&mut g, &params, true);
            let mut none: Option<Dropout<'_, ChaCha8Rng>> = None;
            let l = batch_loss(&mut g, &bound, &batch, kind, &mut none).unwrap();
            let mut gr = g.backward(l.node).unwrap();
            bound
                .all
                .iter()
                .zip(params.tensors())
                .map(|(&id, t)| gr.take(id).unwrap_or_else(|| Tensor::zeros(t.shape()).unwrap()))
                .collect::<Vec<_>>()
        };
        let names = params.names();
        let mut p = params.clone();
        for k in 0..grads.len() {
            for j in 0..grads[k].numel() {
                let orig = p.tensors()[k].data()[j];
                p.tensors_mut()[k].data_mut()[j] = orig + STEP;
                let up = model_loss(&p, &batch, kind);
                p.tensors_mut()[k].data_mut()[j] = orig - STEP;
                let down = model_loss(&p, &batch, kind);
                p.tensors_mut()[k].data_mut()[j] = orig;
                let numeric = (up - down) / (2.0 * STEP);
                let a = grads[k].data()[j];
                assert!(
                    relative_error(a, numeric) <= TOL,
                    "{kind} d_u={d_user} {}[{j}]: tape {a} vs numeric {numeric}",
                    names[k]
                );
            }
        }
    }
}
