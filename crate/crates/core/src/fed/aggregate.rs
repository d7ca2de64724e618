use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One client's upload: its shared parameters and training-set size.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub params: Vec<(String, Tensor<f32>)>,
    pub num_samples: usize,
}

/// Sample-weighted mean `sum_j (n_j / N) w_j` of every parameter.
///
/// Updates are summed in ascending `client_id` order (in f64) regardless of
/// input order, so the result is independent of arrival order.
pub fn fedavg_aggregate(updates: &[ClientUpdate]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut order: Vec<&ClientUpdate> = updates.iter().collect();
    order.sort_by_key(|u| u.client_id);
    let Some(first) = order.first() else {
        return Err(Error::Aggregation("no client updates".into()));
    };
    let total: usize = order.iter().map(|u| u.num_samples).sum();
    if total == 0 {
        return Err(Error::Aggregation("total sample count is zero".into()));
    }
    for u in &order[1..] {
        let same = u.params.len() == first.params.len()
            && u.params
                .iter()
                .zip(&first.params)
                .all(|((a, ta), (b, tb))| a == b && ta.shape() == tb.shape());
        if !same {
            let names = |x: &ClientUpdate| x.params.iter().map(|(n, t)| format!("{n}{:?}", t.shape())).collect::<Vec<_>>();
            let (a, b) = (names(first), names(u));
            let diff = a
                .iter()
                .find(|n| !b.contains(n))
                .or_else(|| b.iter().find(|n| !a.contains(n)))
                .cloned()
                .unwrap_or_else(|| "parameter order".into());
            return Err(Error::Aggregation(format!(
                "client {} and client {} disagree on parameter set (first difference: {diff})",
                first.client_id, u.client_id
            )));
        }
    }
    let weights: Vec<f64> = order.iter().map(|u| u.num_samples as f64 / total as f64).collect();
    first
        .params
        .iter()
        .enumerate()
        .map(|(i, (name, t))| {
            let mut acc = vec![0.0f64; t.numel()];
            for (u, &w) in order.iter().zip(&weights) {
                for (a, &x) in acc.iter_mut().zip(u.params[i].1.data()) {
                    *a += w * x as f64;
                }
            }
            let data = acc.into_iter().map(|v| v as f32).collect();
            Ok((name.clone(), Tensor::new(t.shape().to_vec(), data)?))
        })
        .collect()
}
