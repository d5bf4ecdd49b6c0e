//! Leave-one-out dataset splits.

use super::scene::DataError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitPlan {
    pub held_out: String,
    pub training: Vec<String>,
}

/// Hold one subset out, train on the rest.
pub fn leave_one_out(subsets: &[String], held_out: &str) -> Result<SplitPlan, DataError> {
    if !subsets.iter().any(|s| s == held_out) {
        return Err(DataError::UnknownSubset {
            name: held_out.to_string(),
            available: subsets.to_vec(),
        });
    }
    Ok(SplitPlan {
        held_out: held_out.to_string(),
        training: subsets
            .iter()
            .filter(|s| s.as_str() != held_out)
            .cloned()
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn canonical() -> Vec<String> {
        ["eth", "hotel", "univ", "zara1", "zara2"]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }

    #[test]
    fn holding_out_hotel_trains_on_the_other_four() {
        let plan = leave_one_out(&canonical(), "hotel").unwrap();
        assert_eq!(plan.training, vec!["eth", "univ", "zara1", "zara2"]);
        assert!(!plan.training.contains(&"hotel".to_string()));
    }

    #[test]
    fn unknown_subset_is_an_error() {
        let err = leave_one_out(&canonical(), "mall").unwrap_err();
        assert!(err.to_string().contains("mall"), "{err}");
    }

    #[test]
    fn rotation_covers_every_subset_once() {
        let subsets = canonical();
        let mut held = Vec::new();
        for s in &subsets {
            let plan = leave_one_out(&subsets, s).unwrap();
            assert_eq!(plan.training.len(), 4);
            held.push(plan.held_out);
        }
        held.sort();
        let mut expected = subsets.clone();
        expected.sort();
        assert_eq!(held, expected);
    }
}
