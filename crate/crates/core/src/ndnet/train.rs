use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::tensor::{mse_with_grad, per_sample_mse, Tensor3};
use super::{NetError, Network};
use crate::seed;

/// Mini-batch SGD settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 25,
            learning_rate: 1e-3,
            batch_size: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        if self.epochs == 0 {
            return Err(NetError::InvalidConfig("epochs must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(NetError::InvalidConfig(
                "learning_rate must be positive and finite".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(NetError::InvalidConfig("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Train a copy of `net` to reconstruct `windows` with plain SGD on MSE.
///
/// The sample order of every epoch is drawn from `rng_seed`; two calls with
/// the same inputs return bitwise-identical weights.
pub fn train_model(
    net: &Network,
    windows: &Tensor3,
    cfg: &TrainConfig,
    rng_seed: u64,
) -> Result<Network, NetError> {
    cfg.validate()?;
    if windows.batch() == 0 {
        return Err(NetError::EmptyInput);
    }
    let mut net = net.clone();
    let mut rng = seed::rng(rng_seed);
    let mut order: Vec<usize> = (0..windows.batch()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = windows.gather(chunk);
            let (out, tape) = net.forward_train(&batch)?;
            let (loss, grad) = mse_with_grad(&out, &batch);
            if !loss.is_finite() {
                return Err(NetError::TrainingDiverged { epoch });
            }
            let grads = net.backward(&tape, &grad);
            if grads.tensors.iter().flatten().any(|g| !g.is_finite()) {
                return Err(NetError::TrainingDiverged { epoch });
            }
            for ((_, params), g) in net.param_tensors_mut().into_iter().zip(&grads.tensors) {
                for (p, d) in params.iter_mut().zip(g) {
                    *p -= cfg.learning_rate * d;
                }
            }
            net.update_running_stats(&tape);
        }
    }
    Ok(net)
}

const EVAL_CHUNK: usize = 256;

/// Per-window reconstruction MSE in inference mode.
pub fn window_errors(net: &Network, windows: &Tensor3) -> Result<Vec<f64>, NetError> {
    if windows.batch() == 0 {
        return Err(NetError::EmptyInput);
    }
    let mut errors = Vec::with_capacity(windows.batch());
    let mut start = 0;
    while start < windows.batch() {
        let end = (start + EVAL_CHUNK).min(windows.batch());
        let batch = if start == 0 && end == windows.batch() {
            windows.clone()
        } else {
            windows.slice_batch(start, end)
        };
        let out = net.forward(&batch)?;
        errors.extend(per_sample_mse(&out, &batch));
        start = end;
    }
    Ok(errors)
}

/// Mean reconstruction MSE over all windows, in inference mode.
pub fn evaluate_model(net: &Network, windows: &Tensor3) -> Result<f64, NetError> {
    let errors = window_errors(net, windows)?;
    Ok(errors.iter().sum::<f64>() / errors.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndnet::{BatchNorm1d, Conv1d, Layer};
    use rand::Rng;

    fn random_windows(n: usize, c: usize, l: usize, seed: u64) -> Tensor3 {
        let mut rng = seed::rng(seed);
        Tensor3::from_vec(n, c, l, (0..n * c * l).map(|_| rng.gen_range(0.0..1.0)).collect())
            .unwrap()
    }

    fn small_net(seed: u64) -> Network {
        let mut rng = seed::rng(seed);
        Network::new(
            vec![
                Layer::Conv1d(Conv1d::init_uniform(3, 6, 3, 1, &mut rng)),
                Layer::Batchnorm1d(BatchNorm1d::new(6)),
                Layer::Relu,
                Layer::Conv1d(Conv1d::init_uniform(6, 3, 3, 1, &mut rng)),
            ],
            (3, 5),
        )
        .unwrap()
    }

    #[test]
    fn zero_epochs_is_rejected() {
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let net = small_net(1);
        let w = random_windows(4, 3, 5, 2);
        assert!(matches!(train_model(&net, &w, &cfg, 0), Err(NetError::InvalidConfig(_))));
    }

    #[test]
    fn same_seed_gives_identical_weights() {
        let net = small_net(1);
        let w = random_windows(40, 3, 5, 2);
        let cfg = TrainConfig {
            epochs: 3,
            learning_rate: 0.05,
            batch_size: 8,
        };
        let a = train_model(&net, &w, &cfg, 11).unwrap();
        let b = train_model(&net, &w, &cfg, 11).unwrap();
        assert_eq!(a, b);
        let c = train_model(&net, &w, &cfg, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn one_layer_net_improves_on_constant_data() {
        let mut rng = seed::rng(5);
        let net = Network::new(
            vec![Layer::Conv1d(Conv1d::init_uniform(2, 2, 1, 0, &mut rng))],
            (2, 3),
        )
        .unwrap();
        let w = Tensor3::from_vec(32, 2, 3, vec![0.7; 32 * 6]).unwrap();
        let before = evaluate_model(&net, &w).unwrap();
        let cfg = TrainConfig {
            epochs: 25,
            ..TrainConfig::default()
        };
        let after = evaluate_model(&train_model(&net, &w, &cfg, 3).unwrap(), &w).unwrap();
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn linear_data_loss_drops_tenfold_in_100_epochs() {
        // windows whose second channel is a fixed multiple of the first
        let mut rng = seed::rng(8);
        let n = 64;
        let mut data = Vec::new();
        for _ in 0..n {
            let a: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            data.extend(&a);
            data.extend(a.iter().map(|v| 0.5 * v));
        }
        let w = Tensor3::from_vec(n, 2, 4, data).unwrap();
        let mut init = seed::rng(9);
        let net = Network::new(
            vec![
                Layer::Conv1d(Conv1d::init_uniform(2, 4, 1, 0, &mut init)),
                Layer::Conv1d(Conv1d::init_uniform(4, 2, 1, 0, &mut init)),
            ],
            (2, 4),
        )
        .unwrap();
        let before = evaluate_model(&net, &w).unwrap();
        let cfg = TrainConfig {
            epochs: 100,
            learning_rate: 0.05,
            batch_size: 16,
        };
        let after = evaluate_model(&train_model(&net, &w, &cfg, 1).unwrap(), &w).unwrap();
        assert!(after * 10.0 <= before, "before {before}, after {after}");
    }

    #[test]
    fn divergence_is_reported_with_epoch() {
        let net = small_net(1);
        let w = random_windows(16, 3, 5, 2);
        let cfg = TrainConfig {
            epochs: 50,
            learning_rate: 1e6,
            batch_size: 4,
        };
        assert!(matches!(
            train_model(&net, &w, &cfg, 0),
            Err(NetError::TrainingDiverged { .. })
        ));
    }

    #[test]
    fn evaluate_zero_and_one_losses() {
        let mut id = Conv1d::zeros(2, 2, 1, 0);
        id.weight[0] = 1.0;
        id.weight[3] = 1.0;
        let identity = Network::new(vec![Layer::Conv1d(id)], (2, 3)).unwrap();
        let w = random_windows(10, 2, 3, 4);
        assert_eq!(evaluate_model(&identity, &w).unwrap(), 0.0);

        let zero = Network::new(vec![Layer::Conv1d(Conv1d::zeros(2, 2, 1, 0))], (2, 3)).unwrap();
        let ones = Tensor3::from_vec(5, 2, 3, vec![1.0; 30]).unwrap();
        assert_eq!(evaluate_model(&zero, &ones).unwrap(), 1.0);

        assert!(matches!(
            evaluate_model(&zero, &Tensor3::zeros(0, 2, 3)),
            Err(NetError::EmptyInput)
        ));
    }

    #[test]
    fn evaluate_matches_double_loop_oracle() {
        let net = small_net(21);
        let w = random_windows(300, 3, 5, 22);
        let out = net.forward(&w).unwrap();
        let mut total = 0.0;
        for b in 0..w.batch() {
            let mut s = 0.0;
            for c in 0..3 {
                for t in 0..5 {
                    let d = out.get(b, c, t) - w.get(b, c, t);
                    s += d * d;
                }
            }
            total += s / 15.0;
        }
        let oracle = total / w.batch() as f64;
        let got = evaluate_model(&net, &w).unwrap();
        assert!((got - oracle).abs() < 1e-10, "{got} vs {oracle}");
    }
}
