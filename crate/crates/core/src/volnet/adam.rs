use serde::{Deserialize, Serialize};

use super::model::ModelState;
use super::train::TrainConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step_count: u64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            step_count: 0,
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
        }
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(model: &mut ModelState, gradient: &[f64], config: &TrainConfig) -> Result<()> {
    if gradient.len() != model.params.len() {
        return Err(Error::Shape(format!(
            "gradient length {} does not match {} parameters",
            gradient.len(),
            model.params.len()
        )));
    }
    if let Some(i) = gradient.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!("non-finite gradient at parameter {i}")));
    }
    let (b1, b2) = (config.beta1, config.beta2);
    let st = &mut model.adam;
    st.step_count += 1;
    let t = st.step_count as i32;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (((p, m), v), &g) in model
        .params
        .iter_mut()
        .zip(st.first_moment.iter_mut())
        .zip(st.second_moment.iter_mut())
        .zip(gradient)
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
    }
    Ok(())
}
