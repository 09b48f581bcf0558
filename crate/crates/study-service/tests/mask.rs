use iconoloc_study::{Mask, RleMask};
use proptest::prelude::*;

fn mask() -> impl Strategy<Value = Mask> {
    (1u32..40, 1u32..40).prop_flat_map(|(w, h)| {
        proptest::collection::vec(any::<bool>(), (w * h) as usize).prop_map(move |bits| Mask { width: w, height: h, bits })
    })
}

proptest! {
    #[test]
    fn rle_round_trip(m in mask()) {
        let rle = m.encode();
        prop_assert_eq!(rle.counts.iter().sum::<u64>(), u64::from(m.width * m.height));
        prop_assert!(rle.counts.iter().skip(1).all(|&c| c > 0));
        prop_assert_eq!(rle.decode().unwrap(), m.clone());
        let json = serde_json::to_string(&rle).unwrap();
        prop_assert_eq!(serde_json::from_str::<RleMask>(&json).unwrap(), rle);
    }
}
