use super::optim::ParamStore;
use super::scalar::Scalar;
use super::tensor::Tensor;

/// Central-difference gradient of `f` with respect to every parameter entry.
///
/// Each entry is perturbed in place by `±eps` and restored afterwards.
pub fn finite_difference_gradient<T, F>(store: &mut ParamStore<T>, eps: T, mut f: F) -> Vec<Tensor<T>>
where
    T: Scalar,
    F: FnMut(&ParamStore<T>) -> T,
{
    let two = T::one() + T::one();
    let ids: Vec<_> = store.ids().collect();
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let shape = store.get(id).tensor.shape().to_vec();
        let n = store.get(id).tensor.len();
        let mut g = vec![T::zero(); n];
        for (i, gi) in g.iter_mut().enumerate() {
            let orig = store.get(id).tensor.data()[i];
            store.get_mut(id).tensor.data_mut()[i] = orig + eps;
            let up = f(store);
            store.get_mut(id).tensor.data_mut()[i] = orig - eps;
            let down = f(store);
            store.get_mut(id).tensor.data_mut()[i] = orig;
            *gi = (up - down) / (two * eps);
        }
        out.push(Tensor::new(&shape, g).expect("shape"));
    }
    out
}

/// Largest `|a-b| / max(|a|, |b|, floor)` across two gradient lists.
pub fn max_relative_error<T: Scalar>(a: &[Tensor<T>], b: &[Tensor<T>], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.data().iter().zip(y.data()))
        .map(|(x, y)| {
            let (x, y) = (x.as_f64(), y.as_f64());
            (x - y).abs() / x.abs().max(y.abs()).max(floor)
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_derivative() {
        let mut store = ParamStore::<f64>::new();
        store.register("t", Tensor::vector(vec![3.0])).unwrap();
        let g = finite_difference_gradient(&mut store, 1e-5, |s| {
            let v = s.iter().next().unwrap().tensor.data()[0];
            v * v
        });
        assert!((g[0].data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let mut store = ParamStore::<f64>::new();
        store.register("a", Tensor::vector(vec![1.0, 2.0])).unwrap();
        store.register("b", Tensor::vector(vec![-1.0])).unwrap();
        let g = finite_difference_gradient(&mut store, 1e-5, |_| 4.2);
        assert!(g.iter().all(|t| t.data().iter().all(|v| *v == 0.0)));
        assert_eq!(store.get(store.id_of("a").unwrap()).tensor.data(), &[1.0, 2.0]);
    }
}
