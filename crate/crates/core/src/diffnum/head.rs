use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use super::tape::{Tape, Var};
use crate::error::{shape_err, Result};

/// Outcome regressor `f_Y` on `[Φ, one-hot(A)]`. With `hidden = None` the
/// head is a single affine map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressorParams {
    pub rep_width: usize,
    pub treatment_width: usize,
    pub hidden: Option<usize>,
    pub params: ParamSet,
}

impl RegressorParams {
    pub fn init<R: Rng>(rep_width: usize, treatment_width: usize, hidden: Option<usize>, rng: &mut R) -> Self {
        let input = rep_width + treatment_width;
        let mut params = ParamSet::new();
        match hidden {
            Some(h) => {
                params.push_glorot("head.w1", input, h, rng);
                params.push_filled("head.b1", h, 0.0);
                params.push_glorot("head.w2", h, 1, rng);
                params.push_filled("head.b2", 1, 0.0);
            }
            None => {
                params.push_glorot("head.w", input, 1, rng);
                params.push_filled("head.b", 1, 0.0);
            }
        }
        Self { rep_width, treatment_width, hidden, params }
    }

    pub fn input_width(&self) -> usize {
        self.rep_width + self.treatment_width
    }

    /// Predictions `[n, 1]` from representations `[n, rep_width]` and
    /// treatment encodings `[n, treatment_width]`.
    pub fn forward(&self, tape: &mut Tape, w: &[Var], reps: Var, treatments: Var) -> Result<Var> {
        let (n, rw) = tape.value(reps).as_matrix();
        let (n2, tw) = tape.value(treatments).as_matrix();
        if rw != self.rep_width || tw != self.treatment_width || n != n2 {
            return shape_err(format!(
                "head expects [n,{}] + [n,{}], got [{n},{rw}] + [{n2},{tw}]",
                self.rep_width, self.treatment_width
            ));
        }
        let x = tape.concat_cols(&[reps, treatments])?;
        match self.hidden {
            Some(_) => {
                let h = tape.matmul(x, w[0])?;
                let h = tape.add_row(h, w[1])?;
                let h = tape.relu(h);
                let y = tape.matmul(h, w[2])?;
                tape.add_row(y, w[3])
            }
            None => {
                let y = tape.matmul(x, w[0])?;
                tape.add_row(y, w[1])
            }
        }
    }
}
