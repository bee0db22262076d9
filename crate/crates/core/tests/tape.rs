use pixemb_core::tape::*;
use pixemb_core::tensor::Tensor;
use pixemb_core::Error;

fn t(shape: &[usize], data: &[f32]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

#[test]
fn forward_examples() {
    let mut tape = Tape::new();
    let a = tape.leaf(t(&[1, 1], &[2.0]));
    let b = tape.leaf(t(&[1, 1], &[3.0]));
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c).data(), &[6.0]);

    let x = tape.leaf(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
    let r = tape.relu(x);
    assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);

    let img = tape.leaf(t(&[1, 1, 1, 1], &[0.7]));
    let k = tape.leaf(t(&[1, 1, 1, 1], &[1.0]));
    let y = tape.conv2d(img, k, 1, 0).unwrap();
    assert_eq!(tape.value(y), tape.value(img));
}

#[test]
fn shape_errors_name_the_op() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::zeros(&[2, 3]));
    let b = tape.leaf(Tensor::zeros(&[2, 3]));
    let err = tape.matmul(a, b).unwrap_err();
    assert!(err.to_string().contains("matmul"), "{err}");
    let c = tape.leaf(Tensor::zeros(&[3]));
    assert!(matches!(tape.add(a, c), Err(Error::InvalidShape { op: "add", .. })));
}

#[test]
fn backward_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[2, 3]));
    let s = tape.sum(x);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).data(), &[1.0; 6]);

    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
    let xx = tape.mul(x, x).unwrap();
    let s = tape.sum(xx);
    assert_eq!(tape.backward(s).unwrap().get(x).data(), &[2.0, 4.0]);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[2]));
    assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
}

#[test]
fn unreachable_leaf_gets_zero_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
    let unused = tape.leaf(Tensor::from_vec(vec![5.0; 3]));
    let s = tape.sum(x);
    let g = tape.backward(s).unwrap();
    assert!(!g.is_reachable(unused));
    assert_eq!(g.get(unused).data(), &[0.0; 3]);
}

#[test]
fn gather_backward_scatters_by_column() {
    let mut tape = Tape::new();
    let table = tape.leaf(Tensor::zeros(&[2, 4]));
    let y = tape.gather_columns(table, &[3, 1, 3, 3]).unwrap();
    let w = tape.leaf(t(&[2, 4], &[1.0, 2.0, 3.0, 4.0, 10.0, 20.0, 30.0, 40.0]));
    let p = tape.mul(y, w).unwrap();
    let s = tape.sum(p);
    let g = tape.backward(s).unwrap().get(table);
    assert_eq!(g.data(), &[0.0, 2.0, 0.0, 8.0, 0.0, 20.0, 0.0, 80.0]);
}

#[test]
fn permute_round_trips() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(&[2, 3, 4], (0..24).map(|v| v as f32).collect()).unwrap());
    let p = tape.permute(x, &[2, 0, 1]).unwrap();
    assert_eq!(tape.value(p).shape(), &[4, 2, 3]);
    // element (i,j,k) of x lands at (k,i,j)
    assert_eq!(tape.value(p).data()[(3 * 2 + 1) * 3 + 2], tape.value(x).data()[(1 * 3 + 2) * 4 + 3]);
    let back = tape.permute(p, &[1, 2, 0]).unwrap();
    assert_eq!(tape.value(back), tape.value(x));
}

#[test]
fn inference_tape_cannot_backprop() {
    let mut tape = Tape::inference();
    let x = tape.leaf(Tensor::scalar(1.0));
    assert!(tape.backward(x).is_err());
}

#[test]
fn max_pool_ties_pick_first() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[1, 1, 2, 2], &[1.0, 1.0, 1.0, 1.0]));
    let y = tape.max_pool(x, 2, 2).unwrap();
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap().get(x);
    assert_eq!(g.data(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn batch_norm_normalizes_per_channel() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[2, 2], &[1.0, 10.0, 3.0, 30.0]));
    let g = tape.leaf(Tensor::full(&[2], 1.0));
    let b = tape.leaf(Tensor::zeros(&[2]));
    let (y, stats) = tape.batch_norm(x, g, b, BatchNormMode::Batch { eps: 0.0 }).unwrap();
    let stats = stats.unwrap();
    assert_eq!(stats.mean, vec![2.0, 20.0]);
    assert_eq!(stats.var, vec![1.0, 100.0]);
    assert_eq!(tape.value(y).data(), &[-1.0, -1.0, 1.0, 1.0]);
}
