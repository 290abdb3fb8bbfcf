use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::cohort::{LabeledStay, Task};
use crate::encoders::note_header;

pub const PROLOGUE: &str = "Based on the information collected during current ICU stay,";
pub const ANSWER_INSTRUCTION: &str = "Answer the question using only yes or no.";
pub const NONE_RECORDED: &str = "None recorded";

pub fn question(task: Task) -> String {
    let q = match task {
        Task::Mortality => "Will the patient die during current hospital admission?",
        Task::Los => "Will the ICU stay exceed 3 days?",
    };
    format!("Question: {q} {ANSWER_INSTRUCTION}")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptInstance {
    pub stay_id: i64,
    pub task: Task,
    pub text: String,
    /// Image paths relative to the source directory, oldest first.
    pub image_refs: Vec<String>,
    pub ground_truth: u8,
}

impl PromptInstance {
    pub fn request_id(&self) -> String {
        format!("{}:{}", self.stay_id, self.task.name())
    }
}

/// Table-to-text rendering of a windowed stay. Attaches up to `max_images`
/// of the most recent window images.
pub fn render_prompt(stay: &LabeledStay, task: Task, max_images: usize) -> PromptInstance {
    let s = &stay.stay;
    let mut text = String::new();
    text.push_str(PROLOGUE);
    text.push_str("\n\nDemographics:\n");
    let _ = writeln!(text, "age: {}", s.demographics.age_years);
    let _ = writeln!(text, "gender: {}", s.demographics.gender);
    let _ = writeln!(text, "race: {}", s.demographics.race);

    text.push_str("\nVital signs:\n");
    let mut by_var: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    for v in &s.vitals {
        by_var.entry(&v.variable).or_default().push((v.offset_hours, v.value));
    }
    if by_var.is_empty() {
        let _ = writeln!(text, "{NONE_RECORDED}");
    }
    for (var, mut obs) in by_var {
        obs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        let entries: Vec<String> = obs
            .iter()
            .map(|(t, v)| format!("{} {v}", note_header(*t)))
            .collect();
        let _ = writeln!(text, "{var}: {}", entries.join(", "));
    }

    text.push_str("\nRadiology reports:");
    if s.notes.is_empty() {
        let _ = writeln!(text, " {NONE_RECORDED}");
    } else {
        text.push('\n');
        let mut notes: Vec<_> = s.notes.iter().collect();
        notes.sort_by(|a, b| a.offset_hours.total_cmp(&b.offset_hours).then(a.seq.cmp(&b.seq)));
        for n in notes {
            let body = n.text.split_whitespace().collect::<Vec<_>>().join(" ");
            let _ = writeln!(text, "{} {body}", note_header(n.offset_hours));
        }
    }
    text.push('\n');
    text.push_str(&question(task));

    let mut images: Vec<_> = s.images.iter().collect();
    images.sort_by(|a, b| a.offset_hours.total_cmp(&b.offset_hours).then(a.path.cmp(&b.path)));
    let skip = images.len().saturating_sub(max_images);
    PromptInstance {
        stay_id: stay.stay_id(),
        task,
        text,
        image_refs: images[skip..].iter().map(|i| i.path.clone()).collect(),
        ground_truth: stay.label(task),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::Groups;
    use crate::ingest::{AdmissionInfo, Demographics, ImageRef, NoteRecord, StayKey, StayRecord, VitalObs};

    fn stay() -> LabeledStay {
        LabeledStay {
            stay: StayRecord {
                key: StayKey {
                    stay_id: 7,
                    hadm_id: 70,
                    subject_id: 700,
                    intime: 0,
                    outtime: 86_400,
                },
                demographics: Demographics {
                    age_years: 71.0,
                    gender: "M".into(),
                    race: "WHITE".into(),
                },
                admission: AdmissionInfo {
                    admittime: 0,
                    dischtime: 86_400,
                    deathtime: None,
                    hospital_expire_flag: Some(false),
                },
                vitals: vec![
                    VitalObs { offset_hours: 1.0, variable: "heart_rate".into(), value: 90.0 },
                    VitalObs { offset_hours: 0.5, variable: "heart_rate".into(), value: 88.5 },
                ],
                notes: vec![],
                images: (0..6)
                    .map(|i| ImageRef { offset_hours: i as f64, path: format!("img/{i}.png") })
                    .collect(),
            },
            mortality: 0,
            los: 1,
            groups: Groups {
                gender: "M".into(),
                race: "White".into(),
                age_band: "65–79".into(),
            },
        }
    }

    #[test]
    fn layout() {
        let p = render_prompt(&stay(), Task::Mortality, 4);
        assert!(p.text.starts_with(PROLOGUE));
        assert!(p.text.ends_with(
            "Question: Will the patient die during current hospital admission? Answer the question using only yes or no."
        ));
        assert!(p.text.contains("heart_rate: [t=+0.50h] 88.5, [t=+1.00h] 90\n"));
        assert!(p.text.contains("Radiology reports: None recorded"));
        assert_eq!(p.image_refs, vec!["img/2.png", "img/3.png", "img/4.png", "img/5.png"]);
        assert_eq!(p.request_id(), "7:mortality");
    }

    #[test]
    fn los_question() {
        let mut s = stay();
        s.stay.notes = vec![NoteRecord { seq: 0, offset_hours: 2.0, text: "Clear\nlungs.".into() }];
        let p = render_prompt(&s, Task::Los, 0);
        assert!(p.text.contains("Radiology reports:\n[t=+2.00h] Clear lungs.\n"));
        assert!(p.text.ends_with("Will the ICU stay exceed 3 days? Answer the question using only yes or no."));
        assert_eq!(p.ground_truth, 1);
        assert!(p.image_refs.is_empty());
    }

    #[test]
    fn deterministic() {
        assert_eq!(render_prompt(&stay(), Task::Mortality, 4), render_prompt(&stay(), Task::Mortality, 4));
    }
}
