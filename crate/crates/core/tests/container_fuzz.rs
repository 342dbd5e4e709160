use gebc_core::serialization::{check_truncations, read_container, write_container, ContainerError, NamedTensorMap, TensorBlob};
use proptest::prelude::*;

#[derive(Debug, Clone)]
enum Values {
    F32(Vec<f32>),
    I64(Vec<i64>),
    U8(Vec<u8>),
}

fn entry() -> impl Strategy<Value = (Vec<usize>, Values)> {
    prop::collection::vec(1usize..4, 0..3).prop_flat_map(|dims| {
        let n: usize = dims.iter().product();
        let values = prop_oneof![
            prop::collection::vec(any::<f32>(), n).prop_map(Values::F32),
            prop::collection::vec(any::<i64>(), n).prop_map(Values::I64),
            prop::collection::vec(any::<u8>(), n).prop_map(Values::U8),
        ];
        (Just(dims), values)
    })
}

fn container() -> impl Strategy<Value = NamedTensorMap> {
    (prop::collection::btree_map("[a-z][a-z0-9._]{0,11}", entry(), 0..5), "[ -~]{0,24}").prop_map(|(entries, meta)| {
        let mut map = NamedTensorMap::with_meta(meta);
        for (name, (dims, values)) in entries {
            let blob = match values {
                Values::F32(v) => TensorBlob::from_f32(dims, &v),
                Values::I64(v) => TensorBlob::from_i64(dims, &v),
                Values::U8(v) => TensorBlob::from_u8(dims, v),
            };
            map.insert(name, blob.unwrap()).unwrap();
        }
        map
    })
}

fn bytes(map: &NamedTensorMap) -> Vec<u8> {
    let mut out = Vec::new();
    write_container(map, &mut out).unwrap();
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn every_prefix_is_a_truncation(map in container()) {
        let b = bytes(&map);
        prop_assert_eq!(check_truncations(&b), Ok(b.len()));
        prop_assert_eq!(read_container(&b[..]).unwrap(), map);
    }
}

#[test]
fn cut_payload_names_its_entry() {
    let mut map = NamedTensorMap::with_meta("m");
    map.insert("alpha", TensorBlob::from_f32(vec![3], &[1.0, 2.0, 3.0]).unwrap()).unwrap();
    map.insert("beta", TensorBlob::from_i64(vec![2, 2], &[1, 2, 3, 4]).unwrap()).unwrap();
    let b = bytes(&map);
    let mut named = 0;
    for cut in 0..b.len() {
        if let Err(ContainerError::Truncated(what)) = read_container(&b[..cut]) {
            if what.starts_with("payload") {
                assert!(what.contains("alpha") || what.contains("beta"), "{what}");
                named += 1;
            }
        }
    }
    // 12 payload bytes for alpha plus 32 for beta.
    assert_eq!(named, 44);
}
