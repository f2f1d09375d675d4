use proptest::prelude::*;

use ovdet3d::scene_io::{decode_rle, encode_rle, Bitmap, Rle, SceneError};

fn bitmap() -> impl Strategy<Value = Bitmap> {
    (1u32..12, 1u32..12).prop_flat_map(|(w, h)| {
        prop::collection::vec(any::<bool>(), (w * h) as usize).prop_map(move |d| Bitmap::from_column_major(w, h, d))
    })
}

proptest! {
    #[test]
    fn encode_then_decode_is_identity(b in bitmap()) {
        let rle = encode_rle(&b);
        prop_assert_eq!(rle.counts.iter().map(|&c| c as u64).sum::<u64>(), (b.width() * b.height()) as u64);
        prop_assert_eq!(rle.area(), b.area() as u64);
        prop_assert_eq!(decode_rle(&rle).unwrap(), b);
    }

    #[test]
    fn encoding_is_canonical(b in bitmap()) {
        let rle = encode_rle(&b);
        // only the leading zero-run may be empty
        prop_assert!(rle.counts.iter().skip(1).all(|&c| c > 0));
        prop_assert_eq!(encode_rle(&decode_rle(&rle).unwrap()), rle);
    }

    #[test]
    fn empty_runs_collapse_on_re_encode(b in bitmap(), at in any::<prop::sample::Index>()) {
        let rle = encode_rle(&b);
        // splitting a run with two empty runs leaves the pixels unchanged
        let i = at.index(rle.counts.len());
        let mut counts = rle.counts.clone();
        let run = counts[i];
        counts.splice(i..=i, [run / 2, 0, run - run / 2]);
        let padded = Rle { counts, ..rle.clone() };
        prop_assert_eq!(decode_rle(&padded).unwrap(), b);
        prop_assert_eq!(encode_rle(&decode_rle(&padded).unwrap()), rle);
    }

    #[test]
    fn wrong_run_sum_is_rejected(b in bitmap(), extra in 1u32..5) {
        let mut rle = encode_rle(&b);
        *rle.counts.last_mut().unwrap() += extra;
        let expected = (b.width() * b.height()) as u64;
        let is_run_sum = matches!(decode_rle(&rle), Err(SceneError::RunSum { expected: e, actual }) if e == expected && actual == expected + extra as u64);
        prop_assert!(is_run_sum);
    }
}

#[test]
fn pixel_order_is_column_major() {
    // 3 rows x 2 columns; second pixel of the first column is on
    let rle = Rle { height: 3, width: 2, counts: vec![1, 1, 4] };
    let b = decode_rle(&rle).unwrap();
    assert!(b.get(0, 1));
    assert_eq!(b.pixels().collect::<Vec<_>>(), vec![(0, 1)]);
}
