//! Seeded recognition-error model used by the offline mock backend.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::forge::derive_seed;
use crate::label::{PlateChar, PlateLabel, ALPHABET_LEN};
use crate::Error;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorKinds {
    pub substitute: f64,
    pub insert: f64,
    pub delete: f64,
}

impl ErrorKinds {
    pub const SUBSTITUTE_ONLY: ErrorKinds = ErrorKinds {
        substitute: 1.0,
        insert: 0.0,
        delete: 0.0,
    };
}

impl Default for ErrorKinds {
    fn default() -> Self {
        Self::SUBSTITUTE_ONLY
    }
}

/// Forced confusion: `from` is read as `to` with probability `prob`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub from: PlateChar,
    pub to: PlateChar,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorModel {
    pub char_error_rate: f64,
    #[serde(default)]
    pub error_kinds: ErrorKinds,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub confusion_bias: Vec<Confusion>,
}

impl Default for ErrorModel {
    fn default() -> Self {
        Self {
            char_error_rate: 0.0,
            error_kinds: ErrorKinds::default(),
            seed: 0,
            confusion_bias: Vec::new(),
        }
    }
}

impl ErrorModel {
    pub fn validate(&self) -> Result<(), Error> {
        let k = &self.error_kinds;
        if !(0.0..=1.0).contains(&self.char_error_rate) {
            return Err(Error::InvalidMock("char_error_rate must be within [0, 1]".into()));
        }
        let weights = [k.substitute, k.insert, k.delete];
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) || weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::InvalidMock(
                "error kind weights must be nonnegative with a positive sum".into(),
            ));
        }
        for c in &self.confusion_bias {
            if !(0.0..=1.0).contains(&c.prob) || c.from == c.to {
                return Err(Error::InvalidMock(format!(
                    "confusion {}->{} needs distinct symbols and prob in [0, 1]",
                    c.from, c.to
                )));
            }
        }
        Ok(())
    }

    /// Produces the mock's reading of `truth`.
    ///
    /// The result depends only on `(self, truth, salt)`; callers derive
    /// `salt` from the query so repeated queries get repeated answers.
    pub fn corrupt(&self, truth: &PlateLabel, salt: u64) -> String {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, salt));
        let k = &self.error_kinds;
        let total = k.substitute + k.insert + k.delete;
        let mut out = String::with_capacity(truth.len() + 2);
        for &c in truth.chars() {
            if let Some(bias) = self.confusion_bias.iter().find(|b| b.from == c) {
                if rng.random::<f64>() < bias.prob {
                    out.push(bias.to.as_char());
                    continue;
                }
            }
            if self.char_error_rate == 0.0 || rng.random::<f64>() >= self.char_error_rate {
                out.push(c.as_char());
                continue;
            }
            let pick = rng.random::<f64>() * total;
            if pick < k.substitute {
                out.push(other_char(c, &mut rng).as_char());
            } else if pick < k.substitute + k.insert {
                out.push(c.as_char());
                out.push(random_char(&mut rng).as_char());
            }
            // else: deleted
        }
        out
    }
}

fn random_char<R: Rng + ?Sized>(rng: &mut R) -> PlateChar {
    PlateChar::from_index(rng.random_range(0..ALPHABET_LEN)).unwrap_or(PlateChar::new('A').unwrap())
}

/// Uniform over the 35 symbols other than `c`.
fn other_char<R: Rng + ?Sized>(c: PlateChar, rng: &mut R) -> PlateChar {
    let mut i = rng.random_range(0..ALPHABET_LEN - 1);
    if i >= c.index() {
        i += 1;
    }
    PlateChar::from_index(i).unwrap_or(c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::label::normalize_label;
    use crate::metrics::{align, summarize};

    fn ch(c: char) -> PlateChar {
        PlateChar::new(c).unwrap()
    }

    #[test]
    fn zero_rate_is_identity() {
        let m = ErrorModel::default();
        assert_eq!(m.corrupt(&normalize_label("ABC1234"), 9), "ABC1234");
    }

    #[test]
    fn forced_p_to_r() {
        let m = ErrorModel {
            seed: 3,
            confusion_bias: alloc::vec![Confusion { from: ch('P'), to: ch('R'), prob: 1.0 }],
            ..ErrorModel::default()
        };
        assert_eq!(m.corrupt(&normalize_label("PJW6633"), 11), "RJW6633");
    }

    #[test]
    fn deterministic_per_salt() {
        let m = ErrorModel { char_error_rate: 0.5, seed: 1, ..ErrorModel::default() };
        let t = normalize_label("ABC1234");
        assert_eq!(m.corrupt(&t, 5), m.corrupt(&t, 5));
    }

    #[test]
    fn realized_rate_near_target() {
        let m = ErrorModel { char_error_rate: 0.1, seed: 99, ..ErrorModel::default() };
        let t = normalize_label("ABCDEFGHIJ");
        let mut errors = 0;
        for salt in 0..1000 {
            let pred = normalize_label(&m.corrupt(&t, salt));
            errors += pred.chars().iter().zip(t.chars()).filter(|(a, b)| a != b).count();
        }
        let frac = errors as f64 / 10_000.0;
        assert!((frac - 0.1).abs() <= 0.01, "realized {frac}");
    }

    #[test]
    fn insert_and_delete_kinds() {
        let t = normalize_label("ABCDEFG");
        let ins = ErrorModel {
            char_error_rate: 1.0,
            error_kinds: ErrorKinds { substitute: 0.0, insert: 1.0, delete: 0.0 },
            ..ErrorModel::default()
        };
        assert_eq!(ins.corrupt(&t, 1).len(), 14);
        let del = ErrorModel {
            error_kinds: ErrorKinds { substitute: 0.0, insert: 0.0, delete: 1.0 },
            ..ins.clone()
        };
        assert_eq!(del.corrupt(&t, 1), "");
        let pred = normalize_label(&ins.corrupt(&t, 1));
        assert_eq!(summarize(&align(&t, &pred)), (7, 7));
    }

    #[test]
    fn validation() {
        let bad = ErrorModel { char_error_rate: 1.5, ..ErrorModel::default() };
        assert!(bad.validate().is_err());
        let bad = ErrorModel {
            error_kinds: ErrorKinds { substitute: 0.0, insert: 0.0, delete: 0.0 },
            ..ErrorModel::default()
        };
        assert!(bad.validate().is_err());
        assert!(ErrorModel::default().validate().is_ok());
    }
}
