use std::collections::BTreeSet;

use crate::ontology::TypePath;

fn has_coarse(pred: &BTreeSet<TypePath>, name: &str) -> bool {
    pred.iter().any(|t| t.first_segment() == name)
}

/// BBN post-processing: drop the `/person` branch when an `/organization`
/// type is present, drop `/location` when `/gpe` is present, and rename the
/// `facility` coarse segment to `fac`.
pub fn apply_bbn_rules(pred: &BTreeSet<TypePath>) -> BTreeSet<TypePath> {
    let drop_person = has_coarse(pred, "organization");
    let drop_location = has_coarse(pred, "gpe");
    pred.iter()
        .filter(|t| !(drop_person && t.first_segment() == "person"))
        .filter(|t| !(drop_location && t.first_segment() == "location"))
        .map(|t| {
            if t.first_segment() == "facility" {
                let mut segs: Vec<&str> = t.segments().collect();
                segs[0] = "fac";
                TypePath::from_segments(segs)
            } else {
                t.clone()
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ontology::parse_type;

    fn set(xs: &[&str]) -> BTreeSet<TypePath> {
        xs.iter().map(|s| parse_type(s).unwrap()).collect()
    }

    #[test]
    fn untouched_without_triggers() {
        let p = set(&["/person", "/location/city"]);
        assert_eq!(apply_bbn_rules(&p), p);
    }

    #[test]
    fn fine_organization_also_triggers() {
        let p = set(&["/person", "/organization/corporation"]);
        assert_eq!(apply_bbn_rules(&p), set(&["/organization/corporation"]));
    }
}
