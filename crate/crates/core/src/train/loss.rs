use crate::nn::functional::softmax_row;
use crate::tensor::{Graph, Op, TensorError, Var};
use crate::Scalar;

impl<T: Scalar> Graph<T> {
    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `N×G` logits, evaluated through log-sum-exp with max subtraction.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, TensorError> {
        self.check(logits)?;
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 {
            return Err(TensorError::ShapeMismatch(format!(
                "cross entropy expects N×G logits, got {shape:?}"
            )));
        }
        let (n, g) = (shape[0], shape[1]);
        if n == 0 || targets.is_empty() {
            return Err(TensorError::EmptyBatch);
        }
        if targets.len() != n {
            return Err(TensorError::ShapeMismatch(format!(
                "{n} logit rows but {} targets",
                targets.len()
            )));
        }
        if let Some(&label) = targets.iter().find(|&&t| t >= g) {
            return Err(TensorError::InvalidLabel { label, classes: g });
        }
        let data = self.value(logits).data();
        let mut total = 0.0f64;
        let mut probs = Vec::with_capacity(n * g);
        for (row, &t) in data.chunks(g).zip(targets) {
            let row64: Vec<f64> = row.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
            let max = row64.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row64.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row64[t];
            probs.extend(softmax_row(row));
        }
        let loss = T::lit(total / n as f64);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        Ok(self.push(vec![1], vec![loss], op, &[logits]))
    }
}
