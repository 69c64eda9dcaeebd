use crate::scalar::Scalar;

/// Softmax over the middle axis of an `(outer, axis, inner)` view, with
/// max-subtraction.
pub fn softmax_forward<T: Scalar>(x: &[T], outer: usize, axis: usize, inner: usize) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| (o * axis + a) * inner + i;
            let mut mx = T::neg_infinity();
            for a in 0..axis {
                mx = mx.max(x[at(a)]);
            }
            let mut sum = T::zero();
            for a in 0..axis {
                let e = (x[at(a)] - mx).exp();
                y[at(a)] = e;
                sum = sum + e;
            }
            for a in 0..axis {
                y[at(a)] = y[at(a)] / sum;
            }
        }
    }
    y
}

pub fn softmax_backward<T: Scalar>(y: &[T], dy: &[T], outer: usize, axis: usize, inner: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| (o * axis + a) * inner + i;
            let mut dot = T::zero();
            for a in 0..axis {
                dot = dot + dy[at(a)] * y[at(a)];
            }
            for a in 0..axis {
                dx[at(a)] = y[at(a)] * (dy[at(a)] - dot);
            }
        }
    }
    dx
}
