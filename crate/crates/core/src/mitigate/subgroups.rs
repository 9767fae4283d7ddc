use std::collections::BTreeMap;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::cluster::assign;
use crate::dataset::RawDataset;
use crate::discover::SpuriousReport;
use crate::error::{RavlError, Result};

use super::Encoder;

/// Case-insensitive whole-word matcher for class names in free text.
#[derive(Debug, Clone)]
pub struct LabelMatcher {
    patterns: Vec<Regex>,
}

impl LabelMatcher {
    pub fn new(names: &[String]) -> Result<Self> {
        let patterns = names
            .iter()
            .map(|n| {
                Regex::new(&format!(r"(?i)\b{}\b", regex::escape(n)))
                    .map_err(|e| RavlError::InvalidArgument(format!("label {n:?}: {e}")))
            })
            .collect::<Result<_>>()?;
        Ok(Self { patterns })
    }

    /// The single label named in `text`, or `None` when zero or several
    /// distinct labels occur. A match nested inside a longer label's match
    /// ("shirt" inside "t-shirt") does not count.
    pub fn find(&self, text: &str) -> Option<usize> {
        let spans: Vec<(usize, usize, usize)> = self
            .patterns
            .iter()
            .enumerate()
            .flat_map(|(y, re)| re.find_iter(text).map(move |m| (y, m.start(), m.end())))
            .collect();
        let mut found: Option<usize> = None;
        for &(y, s, e) in &spans {
            let nested = spans.iter().any(|&(z, s2, e2)| z != y && s2 <= s && e <= e2 && (e2 - s2) > (e - s));
            if nested {
                continue;
            }
            match found {
                None => found = Some(y),
                Some(prev) if prev != y => return None,
                _ => {}
            }
        }
        found
    }
}

/// Caption-derived class for every image.
pub fn assign_pseudo_labels(ft: &RawDataset, names: &[String]) -> Result<Vec<Option<usize>>> {
    let matcher = LabelMatcher::new(names)?;
    Ok(ft.images.iter().map(|img| matcher.find(&img.caption)).collect())
}

/// Sampling group of an image: its pseudo-label and whether it carries a
/// flagged spurious region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Subgroup {
    pub label: Option<usize>,
    pub spurious: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupAssignment {
    /// Per region of the fine-tuning set.
    pub region_spurious: Vec<bool>,
    pub pseudo_labels: Vec<Option<usize>>,
    pub image_groups: Vec<Subgroup>,
    pub warnings: Vec<String>,
}

impl SubgroupAssignment {
    pub fn group_counts(&self) -> BTreeMap<Subgroup, usize> {
        let mut counts = BTreeMap::new();
        for g in &self.image_groups {
            *counts.entry(*g).or_insert(0) += 1;
        }
        counts
    }
}

/// Flags every fine-tuning region whose nearest medoid (under the encoder
/// that produced the report) is the top-ranked cluster.
pub fn assign_subgroups(
    ft: &RawDataset,
    encoder: &Encoder,
    names: &[String],
    report: Option<&SpuriousReport>,
) -> Result<SubgroupAssignment> {
    let pseudo_labels = assign_pseudo_labels(ft, names)?;
    let mut warnings = Vec::new();
    let top = report.and_then(|r| r.top_cluster().map(|c| (r, c.id)));
    let region_spurious = match top {
        Some((report, id)) => ft
            .regions
            .iter()
            .map(|r| Ok(assign(&encoder.embed(&r.features)?, &report.clustering)? == id))
            .collect::<Result<Vec<_>>>()?,
        None => {
            warnings.push("no top-ranked spurious cluster; every region treated as non-spurious".into());
            vec![false; ft.regions.len()]
        }
    };
    let image_groups = ft
        .images
        .iter()
        .zip(&pseudo_labels)
        .map(|(img, &label)| Subgroup { label, spurious: img.regions.iter().any(|&r| region_spurious[r]) })
        .collect();
    Ok(SubgroupAssignment { region_spurious, pseudo_labels, image_groups, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn digits() -> Vec<String> {
        ["zero", "one", "two", "nine"].iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn caption_parsing() {
        let m = LabelMatcher::new(&digits()).unwrap();
        assert_eq!(m.find("the image shows a nine"), Some(3));
        assert_eq!(m.find("The Number is a NINE."), Some(3));
        assert_eq!(m.find("a one next to a two"), None);
        assert_eq!(m.find("a photo of something"), None);
        assert_eq!(m.find("someone is here"), None);
        assert_eq!(m.find("nine, or rather nine"), Some(3));
    }

    #[test]
    fn nested_label_names() {
        let names: Vec<String> = ["t-shirt", "shirt", "ankle boot"].iter().map(|s| s.to_string()).collect();
        let m = LabelMatcher::new(&names).unwrap();
        assert_eq!(m.find("the image shows a t-shirt"), Some(0));
        assert_eq!(m.find("the image shows a shirt"), Some(1));
        assert_eq!(m.find("an ankle boot"), Some(2));
        assert_eq!(m.find("a shirt and a t-shirt"), None);
    }
}
