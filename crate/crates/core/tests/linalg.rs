use pixemb_core::linalg::*;

#[test]
fn gemm_matches_naive_with_transposes() {
    let (m, k, n) = (3, 4, 5);
    let a: Vec<f32> = (0..m * k).map(|i| i as f32 * 0.5 - 2.0).collect();
    let b: Vec<f32> = (0..k * n).map(|i| (i % 7) as f32 - 3.0).collect();
    let mut naive = vec![0.0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            naive[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
        }
    }
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, &a, false, &b, false, 0.0, &mut c);
    assert_eq!(c, naive);

    // a stored as k×m, b stored as n×k
    let at: Vec<f32> = (0..k * m).map(|i| a[(i % m) * k + i / m]).collect();
    let bt: Vec<f32> = (0..n * k).map(|i| b[(i % k) * n + i / k]).collect();
    let mut c2 = vec![0.0; m * n];
    gemm(m, k, n, &at, true, &bt, true, 0.0, &mut c2);
    assert_eq!(c2, naive);
}

#[test]
fn col2im_is_adjoint_of_im2col() {
    let g = ConvGeometry {
        channels: 2,
        height: 5,
        width: 4,
        kernel_h: 3,
        kernel_w: 3,
        stride: 2,
        padding: 1,
    };
    let x: Vec<f32> = (0..2 * 5 * 4).map(|i| (i as f32).sin()).collect();
    let ncols = g.patch_len() * g.out_height() * g.out_width();
    let y: Vec<f32> = (0..ncols).map(|i| (i as f32 * 0.37).cos()).collect();
    let mut cols = vec![0.0; ncols];
    im2col(&x, &g, &mut cols);
    let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
    let mut dx = vec![0.0; x.len()];
    col2im(&y, &g, &mut dx);
    let rhs: f64 = x.iter().zip(&dx).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
    assert!((lhs - rhs).abs() < 1e-4, "{lhs} vs {rhs}");
}
