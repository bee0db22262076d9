use pixemb_core::image::*;
use pixemb_core::Error;

#[test]
fn rejects_out_of_range_values() {
    assert!(ImageBatch::from_values(1, 1, 1, &[0, 128, 255]).is_ok());
    assert!(matches!(
        ImageBatch::from_values(1, 1, 1, &[0, 256, 1]),
        Err(Error::InvalidInput(_))
    ));
    assert!(ImageBatch::from_values(1, 1, 1, &[-1, 0, 0]).is_err());
}

#[test]
fn nchw_layout() {
    // 1x1x2 image: pixel0 = (1,2,3), pixel1 = (4,5,6)
    let b = ImageBatch::new(1, 1, 2, vec![1, 2, 3, 4, 5, 6]).unwrap();
    assert_eq!(b.nchw_indices(), vec![1, 4, 2, 5, 3, 6]);
    assert_eq!(b.pixel(0, 0, 1, 2), 6);
}
