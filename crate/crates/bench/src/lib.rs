//! Benchmark fixtures.

use malaria_core::eval::PredictionRecord;
use malaria_core::svm::FeatureMatrix;
use malaria_core::{Label, RngStream, Tensor};

/// Input, weights and bias of one `3 x 3` convolution.
pub fn conv_case(n: usize, c_in: usize, c_out: usize, side: usize) -> (Tensor, Tensor, Tensor) {
    let mut s = RngStream::new(1, 0);
    let x = Tensor::uniform(&[n, c_in, side, side], -1.0, 1.0, &mut s).expect("valid shape");
    let w = Tensor::uniform(&[c_out, c_in, 3, 3], -0.1, 0.1, &mut s).expect("valid shape");
    let b = Tensor::zeros(&[c_out]).expect("valid shape");
    (x, w, b)
}

/// Two overlapping Gaussian classes.
pub fn svm_case(n: usize, dim: usize) -> FeatureMatrix {
    let mut s = RngStream::new(2, 0);
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y: i8 = if i % 2 == 0 { 1 } else { -1 };
        for _ in 0..dim {
            data.push((0.7 * y as f64 + s.standard_normal()) as f32);
        }
        labels.push(y);
    }
    FeatureMatrix::new(dim, data, labels).expect("consistent sizes")
}

pub fn auc_case(n: usize) -> Vec<PredictionRecord> {
    let mut s = RngStream::new(3, 0);
    (0..n)
        .map(|i| {
            let truth = if s.bernoulli(0.5) { Label::Parasitized } else { Label::Uninfected };
            PredictionRecord::new(i, truth, s.next_f64()).expect("p in range")
        })
        .collect()
}
