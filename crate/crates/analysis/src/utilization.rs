//! Hard-selection frequency tables from routing logs.

use crate::error::{contract_err, Result};

/// One hard selection: which expert fired at which layer, and under which
/// teacher route if any.
#[derive(Debug, Clone, Copy)]
pub struct SelectionEvent {
    pub layer: usize,
    pub teacher: Option<usize>,
    pub expert: usize,
}

#[derive(Debug, Clone)]
pub struct UtilizationTable {
    /// `[layer][expert]` frequencies; each layer row sums to 1.
    pub per_layer: Vec<Vec<f64>>,
    /// `[layer][teacher][expert]` frequencies; rows with any mass sum to 1.
    pub per_layer_teacher: Vec<Vec<Vec<f64>>>,
}

fn normalize(counts: &[usize]) -> Vec<f64> {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return vec![0.0; counts.len()];
    }
    counts.iter().map(|c| *c as f64 / total as f64).collect()
}

pub fn expert_utilization(
    events: &[SelectionEvent],
    layers: usize,
    teachers: usize,
    experts: usize,
) -> Result<UtilizationTable> {
    if events.is_empty() {
        return contract_err("utilization needs at least one selection event");
    }
    let mut layer_counts = vec![vec![0usize; experts]; layers];
    let mut lt_counts = vec![vec![vec![0usize; experts]; teachers]; layers];
    for e in events {
        if e.layer >= layers || e.expert >= experts {
            return contract_err(format!(
                "event ({}, {}) outside {layers} layers x {experts} experts",
                e.layer, e.expert
            ));
        }
        layer_counts[e.layer][e.expert] += 1;
        if let Some(t) = e.teacher {
            if t >= teachers {
                return contract_err(format!("teacher {t} outside 0..{teachers}"));
            }
            lt_counts[e.layer][t][e.expert] += 1;
        }
    }
    Ok(UtilizationTable {
        per_layer: layer_counts.iter().map(|c| normalize(c)).collect(),
        per_layer_teacher: lt_counts
            .iter()
            .map(|per_t| per_t.iter().map(|c| normalize(c)).collect())
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ver_core::rng::{substream, uniform_vec};

    #[test]
    fn single_expert_means_unit_frequency() {
        let events: Vec<SelectionEvent> = (0..10)
            .map(|_| SelectionEvent {
                layer: 0,
                teacher: Some(1),
                expert: 2,
            })
            .collect();
        let t = expert_utilization(&events, 2, 3, 4).unwrap();
        assert_eq!(t.per_layer[0], vec![0.0, 0.0, 1.0, 0.0]);
        assert_eq!(t.per_layer[1], vec![0.0; 4]);
        assert_eq!(t.per_layer_teacher[0][1], vec![0.0, 0.0, 1.0, 0.0]);
        assert_eq!(t.per_layer_teacher[0][0], vec![0.0; 4]);
    }

    #[test]
    fn uniform_log_is_uniform_within_monte_carlo_noise() {
        let mut rng = substream(31, "data");
        let experts = 5;
        let draws: Vec<f64> = uniform_vec(&mut rng, 10_000, 0.0, 1.0);
        let events: Vec<SelectionEvent> = draws
            .iter()
            .map(|u| SelectionEvent {
                layer: 0,
                teacher: None,
                expert: ((u * experts as f64) as usize).min(experts - 1),
            })
            .collect();
        let t = expert_utilization(&events, 1, 1, experts).unwrap();
        for f in &t.per_layer[0] {
            assert!((f - 0.2).abs() < 0.02, "frequency {f}");
        }
    }

    #[test]
    fn occupied_rows_sum_to_one() {
        let events = [
            SelectionEvent { layer: 0, teacher: Some(0), expert: 0 },
            SelectionEvent { layer: 0, teacher: Some(0), expert: 3 },
            SelectionEvent { layer: 1, teacher: Some(2), expert: 1 },
        ];
        let t = expert_utilization(&events, 2, 3, 4).unwrap();
        for row in &t.per_layer {
            let s: f64 = row.iter().sum();
            assert!(s == 0.0 || (s - 1.0).abs() < 1e-9);
        }
        for per_t in &t.per_layer_teacher {
            for row in per_t {
                let s: f64 = row.iter().sum();
                assert!(s == 0.0 || (s - 1.0).abs() < 1e-9);
            }
        }
        assert!(expert_utilization(&[], 1, 1, 1).is_err());
    }
}
