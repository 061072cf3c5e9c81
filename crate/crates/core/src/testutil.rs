use faer::Mat;
use nalgebra::DMatrix;

pub fn to_na(m: &Mat<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

pub fn dense_inverse(m: &Mat<f64>) -> DMatrix<f64> {
    to_na(m).try_inverse().expect("singular test matrix")
}
