//! Reverse-mode automatic differentiation over dense row-major tensors.
//!
//! A [`Graph`] records every primitive applied during a forward pass.
//! Parameters live outside the graph in a [`ParamStore`]; [`Graph::backward`]
//! adds `∂loss/∂param` into the store's gradient buffers, skipping frozen
//! parameters and every subgraph that does not depend on a trainable one.

mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::{grad_check, rel_err, GradCheckOptions, GradCheckReport, ParamError};
pub use graph::{same_padding, BatchNormMode, BnObservation, Graph, Primitive, Var};
pub use params::{name_matches, Buffer, BufferId, ParamId, ParamStore, Parameter};
pub use tensor::{Real, Tensor};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut g = Graph::<f64>::new();
        let i2 = g.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let m = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let p = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(p).data(), &[1., 2., 3., 4.]);
        let a = g.constant(t(&[1, 2], &[1., 2.]));
        let b = g.constant(t(&[2, 1], &[3., 4.]));
        let d = g.matmul(a, b).unwrap();
        assert_eq!(g.value(d).data(), &[11.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3] vs [2, 3]"), "{err}");
    }

    #[test]
    fn conv_center_tap_stride_two() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 5], &[1., 2., 3., 4., 5.]));
        let w = g.constant(t(&[1, 1, 3], &[0., 1., 0.]));
        let b = g.constant(t(&[1, 1], &[0.]));
        let y = g.conv1d_same(x, w, b, 2).unwrap();
        assert_eq!(g.value(y).data(), &[1., 3., 5.]);
    }

    #[test]
    fn conv_box_sum_zero_pads() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 4], &[1., 1., 1., 1.]));
        let w = g.constant(t(&[1, 1, 3], &[1., 1., 1.]));
        let b = g.constant(t(&[1, 1], &[0.]));
        let y = g.conv1d_same(x, w, b, 1).unwrap();
        assert_eq!(g.value(y).data(), &[2., 3., 3., 2.]);
    }

    #[test]
    fn conv_output_length_is_ceil() {
        for tlen in 1..40 {
            for s in 1..5 {
                let (out, left) = same_padding(tlen, 3, s);
                assert_eq!(out, tlen.div_ceil(s));
                assert!(left <= 1);
            }
        }
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 2], &[0., 0.]));
        let y = g.softmax(x, 1).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
        let x = g.constant(t(&[1, 2], &[1000., 0.]));
        let y = g.softmax(x, 1).unwrap();
        let v = g.value(y).data();
        assert!((v[0] - 1.0).abs() < 1e-12 && v[1].abs() < 1e-12);
        assert!(v.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn concat_split_roundtrip() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_f64(&[6, 3], &(0..18).map(f64::from).collect::<Vec<_>>()).unwrap());
        let b = g.constant(Tensor::from_f64(&[6, 2], &(0..12).map(|v| -f64::from(v)).collect::<Vec<_>>()).unwrap());
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.shape(c), &[6, 5]);
        let parts = g.split(c, 1, &[3, 2]).unwrap();
        assert_eq!(g.value(parts[0]), g.value(a));
        assert_eq!(g.value(parts[1]), g.value(b));
    }

    #[test]
    fn broadcast_repeat_columns() {
        let mut g = Graph::<f64>::new();
        let v = g.constant(Tensor::from_f64(&[128, 1], &(0..128).map(f64::from).collect::<Vec<_>>()).unwrap());
        let r = g.broadcast_repeat(v, 1, 7).unwrap();
        let tv = g.value(r);
        assert_eq!(tv.shape(), &[128, 7]);
        for c in 1..7 {
            assert_eq!(tv.column_vec(c), tv.column_vec(0));
        }
    }

    #[test]
    fn tanh_of_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 1]));
        let y = g.tanh(x);
        assert_eq!(g.value(y).data(), &[0.0]);
    }

    #[test]
    fn backward_sum_gives_ones_and_accumulates() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("p", t(&[2, 3], &[1., -2., 3., 0.5, 0., 4.]));
        let mut g = Graph::new();
        let p = g.param(&store, id);
        let s = g.sum(p);
        g.backward(s, &mut store).unwrap();
        assert!(store.get(id).grad.data().iter().all(|&v| v == 1.0));
        g.backward(s, &mut store).unwrap();
        assert!(store.get(id).grad.data().iter().all(|&v| v == 2.0));
        store.zero_grads();
        let mut g = Graph::new();
        let p = g.param(&store, id);
        let sq = g.mul(p, p).unwrap();
        let s = g.sum(sq);
        g.backward(s, &mut store).unwrap();
        let expect: Vec<f64> = store.value(id).data().iter().map(|v| 2.0 * v).collect();
        assert_eq!(store.get(id).grad.data(), expect.as_slice());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("p", Tensor::zeros(&[2, 2]));
        let mut g = Graph::new();
        let p = g.param(&store, id);
        assert!(matches!(
            g.backward(p, &mut store),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn frozen_param_gets_no_gradient() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("frozen.w", Tensor::full(&[2, 2], 1.0));
        store.set_trainable(&["frozen"], false).unwrap();
        let mut g = Graph::new();
        let p = g.param(&store, id);
        let s = g.sum(p);
        g.backward(s, &mut store).unwrap();
        assert!(store.get(id).grad.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_finite_names_primitive() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 1], &[f64::MAX]));
        let y = g.scale(x, 10.0);
        let _ = g.tanh(y);
        match g.check_finite() {
            Err(Error::NonFinite { primitive, .. }) => assert_eq!(primitive, "scale"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn grad_check_linear_passes_and_fault_fails() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", t(&[2, 3], &[0.3, -0.2, 0.5, 0.1, 0.7, -0.4]));
        let x = t(&[3, 2], &[1.0, -0.5, 0.25, 2.0, -1.0, 0.3]);
        let prog = |g: &mut Graph<f64>, s: &ParamStore<f64>| {
            let w = g.param(s, w);
            let x = g.constant(x.clone());
            let y = g.matmul(w, x)?;
            let y = g.tanh(y);
            Ok(g.sum(y))
        };
        let report = grad_check(&mut store, prog, &GradCheckOptions::default()).unwrap();
        assert!(report.passed(), "{report:?}");
        let opts = GradCheckOptions {
            fault: Some(Primitive::Tanh),
            ..Default::default()
        };
        let report = grad_check(&mut store, prog, &opts).unwrap();
        assert!(!report.passed());
    }

    #[test]
    fn embedding_scatter_counts_multiplicity() {
        let mut store = ParamStore::<f64>::new();
        let table = store.add("table", Tensor::full(&[4, 3], 0.5));
        let mut g = Graph::new();
        let tv = g.param(&store, table);
        let e = g.embedding(tv, &[2, 0, 2, 2]).unwrap();
        assert_eq!(g.shape(e), &[3, 4]);
        let s = g.sum(e);
        g.backward(s, &mut store).unwrap();
        let grad = &store.get(table).grad;
        assert_eq!(grad.row_slice(2), &[3.0, 3.0, 3.0]);
        assert_eq!(grad.row_slice(0), &[1.0, 1.0, 1.0]);
        assert_eq!(grad.row_slice(1), &[0.0, 0.0, 0.0]);
        assert!(matches!(
            g.embedding(tv, &[4]),
            Err(Error::OutOfVocabulary { id: 4, vocab: 4 })
        ));
    }
}
