//! Property-based invariants of the tensor engine.

use proptest::prelude::*;
use tinv_core::{ops, Tensor};

fn small_matrix() -> impl Strategy<Value = (usize, usize, Vec<f32>)> {
    (1usize..5, 1usize..6).prop_flat_map(|(r, c)| {
        proptest::collection::vec(-5.0f32..5.0, r * c).prop_map(move |v| (r, c, v))
    })
}

proptest! {
    #[test]
    fn reshape_preserves_values((r, c, v) in small_matrix()) {
        let t = Tensor::from_vec(&[r, c], v.clone(), false).unwrap();
        let flat = t.reshape(&[r * c]).unwrap();
        prop_assert_eq!(flat.to_vec(), v.clone());
        let back = flat.reshape(&[c, r]).unwrap();
        prop_assert_eq!(back.to_vec(), v);
    }

    #[test]
    fn addition_commutes_bitwise((r, c, v) in small_matrix(), shift in -3.0f32..3.0) {
        let a = Tensor::from_vec(&[r, c], v.clone(), false).unwrap();
        let b = a.add_scalar(shift).unwrap();
        let ab = a.add(&b).unwrap();
        let ba = b.add(&a).unwrap();
        let bits = |t: &Tensor| t.to_vec().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&ab), bits(&ba));
    }

    #[test]
    fn softmax_rows_are_distributions((r, c, v) in small_matrix()) {
        let t = Tensor::from_vec(&[r, c], v, false).unwrap();
        let y = t.softmax_lastdim().unwrap().to_vec();
        for row in y.chunks(c) {
            let s: f32 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-5);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn l2_rows_have_unit_or_zero_norm((r, c, v) in small_matrix()) {
        let t = Tensor::from_vec(&[r, c], v, false).unwrap();
        let y = t.l2_normalize_rows().unwrap().to_vec();
        for row in y.chunks(c) {
            let n: f32 = row.iter().map(|x| x * x).sum::<f32>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-4 || n < 1e-4);
        }
    }

    #[test]
    fn concat_rows_preserves_order((r1, c, v1) in small_matrix(), r2 in 1usize..4) {
        let a = Tensor::from_vec(&[r1, c], v1.clone(), false).unwrap();
        let v2: Vec<f32> = (0..r2 * c).map(|i| i as f32).collect();
        let b = Tensor::from_vec(&[r2, c], v2.clone(), false).unwrap();
        let cat = ops::concat_rows(&[&a, &b]).unwrap();
        prop_assert_eq!(cat.shape(), &[r1 + r2, c]);
        let joined: Vec<f32> = v1.into_iter().chain(v2).collect();
        prop_assert_eq!(cat.to_vec(), joined);
    }

    #[test]
    fn normalized_groups_have_zero_mean_unit_var((r, _c, v) in small_matrix()) {
        // single group over a [1, 1, r, len] volume with identity affine
        let len = v.len() / r;
        if len == 0 { return Ok(()); }
        let vol: Vec<f32> = v[..r * len].to_vec();
        // degenerate (constant) volumes are allowed to normalize to zero
        let t = Tensor::from_vec(&[1, 1, r, len], vol, false).unwrap();
        let gamma = Tensor::from_vec(&[1], vec![1.0], false).unwrap();
        let beta = Tensor::from_vec(&[1], vec![0.0], false).unwrap();
        let y = t.group_norm(1, &gamma, &beta, 1e-5).unwrap().to_vec();
        let m: f32 = y.iter().sum::<f32>() / y.len() as f32;
        let var: f32 = y.iter().map(|x| (x - m) * (x - m)).sum::<f32>() / y.len() as f32;
        prop_assert!(m.abs() < 1e-4);
        prop_assert!(var < 1.1);
    }
}
