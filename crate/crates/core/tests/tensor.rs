use pixemb_core::tensor::*;
use pixemb_core::Error;

#[test]
fn shape_must_match_data() {
    assert!(Tensor::new(&[2, 3], vec![0.0; 6]).is_ok());
    assert!(matches!(
        Tensor::new(&[2, 3], vec![0.0; 5]),
        Err(Error::InvalidShape { .. })
    ));
    assert!(Tensor::new(&[0], vec![]).is_err());
}

#[test]
fn reshape_preserves_data() {
    let t = Tensor::new(&[2, 3], (0..6).map(|x| x as f32).collect()).unwrap();
    let r = t.clone().reshaped(&[3, 2]).unwrap();
    assert_eq!(r.data(), t.data());
    assert!(t.reshaped(&[4]).is_err());
}
