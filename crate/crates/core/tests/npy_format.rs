use proptest::prelude::*;
use reshuffle_core::npy::{NpyArray, NpyData};
use reshuffle_core::{load_tensor, save_tensor, Error, FeatureMap};

// Written by numpy.save for np.arange(6, dtype='<f4').reshape(1, 2, 3).
const NUMPY_F4: &[u8] = b"\x93NUMPY\x01\x00v\x00{'descr': '<f4', 'fortran_order': False, 'shape': (1, 2, 3), }                                                       \n\x00\x00\x00\x00\x00\x00\x80?\x00\x00\x00@\x00\x00@@\x00\x00\x80@\x00\x00\xa0@";

// numpy.save of np.array([[[0.5, -1.25]]], dtype='<f8').
const NUMPY_F8: &[u8] = b"\x93NUMPY\x01\x00v\x00{'descr': '<f8', 'fortran_order': False, 'shape': (1, 1, 2), }                                                       \n\x00\x00\x00\x00\x00\x00\xe0?\x00\x00\x00\x00\x00\x00\xf4\xbf";

#[test]
fn reads_numpy_float32() {
    let map = FeatureMap::from_npy(NpyArray::from_bytes(NUMPY_F4).unwrap()).unwrap();
    assert_eq!(map.shape(), (1, 2, 3));
    assert_eq!(map.data(), &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
}

#[test]
fn writes_numpy_identical_bytes() {
    let map = FeatureMap::new(1, 2, 3, (0..6).map(|v| v as f32).collect()).unwrap();
    assert_eq!(map.to_npy().to_bytes(), NUMPY_F4);
}

#[test]
fn reads_numpy_float64_as_float32() {
    let array = NpyArray::from_bytes(NUMPY_F8).unwrap();
    assert_eq!(array.data, NpyData::F64(vec![0.5, -1.25]));
    let map = FeatureMap::from_npy(array).unwrap();
    assert_eq!(map.data(), &[0.5, -1.25]);
}

#[test]
fn zeros_file_loads_as_zero_map() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("z.npy");
    NpyArray::new(vec![2, 2, 2], NpyData::F32(vec![0.0; 8])).unwrap().write(&path).unwrap();
    let map = load_tensor(&path).unwrap();
    assert_eq!(map.shape(), (2, 2, 2));
    assert!(map.data().iter().all(|&v| v == 0.0));
}

#[test]
fn truncated_payload_is_rejected() {
    let short = &NUMPY_F4[..NUMPY_F4.len() - 1];
    assert!(matches!(NpyArray::from_bytes(short), Err(Error::Format(_))));
}

#[test]
fn missing_file_is_io_error() {
    assert!(matches!(load_tensor("/nonexistent/x.npy"), Err(Error::Io { .. })));
}

fn feature_map() -> impl Strategy<Value = FeatureMap> {
    (1usize..5, 1usize..7, 1usize..7).prop_flat_map(|(c, h, w)| {
        prop::collection::vec(-1e6f32..1e6, c * h * w)
            .prop_map(move |data| FeatureMap::new(c, h, w, data).unwrap())
    })
}

proptest! {
    #[test]
    fn save_load_round_trip(map in feature_map()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.npy");
        save_tensor(&map, &path).unwrap();
        let back = load_tensor(&path).unwrap();
        prop_assert_eq!(back.shape(), map.shape());
        prop_assert!(back.data().iter().zip(map.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        let again = dir.path().join("again.npy");
        save_tensor(&back, &again).unwrap();
        prop_assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    }

    #[test]
    fn header_is_aligned(map in feature_map()) {
        let bytes = map.to_npy().to_bytes();
        let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
        prop_assert_eq!((10 + header_len) % 64, 0);
        prop_assert_eq!(bytes[10 + header_len - 1], b'\n');
        prop_assert_eq!(bytes.len(), 10 + header_len + 4 * map.data().len());
    }
}
