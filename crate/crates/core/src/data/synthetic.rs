use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use crate::gbdt::FeatureMap;

use super::{DataError, TransactionRecord};

/// Shift of the fraud-class mean on the informative features, in standard
/// deviations.
const FRAUD_SHIFT: f64 = 1.5;

/// Gaussian clusters over features `V1..Vd`. Fraud rows have their mean
/// shifted on the first half of the features (alternating sign); the rest is
/// shared noise.
pub fn generate_synthetic(
    n: usize,
    fraud_rate: f64,
    d: usize,
    seed: u64,
) -> Result<Vec<TransactionRecord>, DataError> {
    if !(fraud_rate > 0.0 && fraud_rate < 1.0) {
        return Err(DataError::Parameter(format!(
            "fraud_rate {fraud_rate} is not in (0, 1)"
        )));
    }
    if d == 0 {
        return Err(DataError::Parameter("need at least one feature".into()));
    }
    let names: Vec<String> = (1..=d).map(|i| format!("V{i}")).collect();
    let informative = d.div_ceil(2);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let records = (0..n)
        .map(|time_index| {
            let label = u8::from(rng.gen_bool(fraud_rate));
            let features: FeatureMap = names
                .iter()
                .enumerate()
                .map(|(j, name)| {
                    let mean = if label == 1 && j < informative {
                        if j % 2 == 0 {
                            FRAUD_SHIFT
                        } else {
                            -FRAUD_SHIFT
                        }
                    } else {
                        0.0
                    };
                    (name.clone(), mean + noise.sample(&mut rng))
                })
                .collect();
            TransactionRecord {
                features,
                label,
                time_index,
            }
        })
        .collect();
    Ok(records)
}
