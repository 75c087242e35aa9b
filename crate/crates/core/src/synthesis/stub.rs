//! Offline stand-in for the generator LLM.
//!
//! Outputs are a deterministic function of (seed, prompt). Paraphrases
//! rotate the word order; augmentations and hard negatives swap a subset of
//! words for pseudo-words of the same length and script. Both keep the
//! character count, so clean outputs always sit inside the length band.
//! Optional fault injection replaces an output field with a known
//! constraint violation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::client::{ApiError, LlmClient};
use super::validate::{dominant_script, Script};
use super::{PromptSpec, SynthKind};
use crate::hashing::stable_hash64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    /// the text repeated twice
    DoubleLength,
    /// letters moved to another script
    WrongScript,
    /// the reference text copied unchanged
    Verbatim,
}

impl FaultKind {
    pub const ALL: [FaultKind; 3] = [FaultKind::DoubleLength, FaultKind::WrongScript, FaultKind::Verbatim];
}

#[derive(Debug, Clone, PartialEq)]
pub struct StubOutput {
    pub item: Value,
    /// the field that was corrupted, and how
    pub fault: Option<(String, FaultKind)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StubClient {
    seed: u64,
    fault_rate: f64,
}

impl StubClient {
    pub fn new(seed: u64) -> Self {
        StubClient { seed, fault_rate: 0.0 }
    }

    /// Corrupt each output with probability `rate`.
    pub fn with_fault_rate(mut self, rate: f64) -> Self {
        self.fault_rate = rate.clamp(0.0, 1.0);
        self
    }

    /// Outputs for `prompt`, with the injected faults marked.
    pub fn respond(&self, prompt: &PromptSpec) -> Vec<StubOutput> {
        let source = prompt.source_value();
        let text = |k: &str| source.get(k).and_then(Value::as_str).unwrap_or_default().to_string();
        let mut rng = ChaCha8Rng::seed_from_u64(stable_hash64(&[
            &self.seed.to_le_bytes(),
            prompt.system_text.as_bytes(),
            prompt.user_text.as_bytes(),
        ]));
        (0..prompt.expected_outputs)
            .map(|k| {
                let salt = stable_hash64(&[&self.seed.to_le_bytes(), &(k as u64).to_le_bytes()]);
                // (field, generated, reference the validator compares against)
                let fields: Vec<(&str, String, String)> = match (prompt.kind, source.get("text").is_some()) {
                    (SynthKind::Paraphrase, true) => {
                        vec![("text", rewrite(&text("text"), k + 1), text("text"))]
                    }
                    (SynthKind::Paraphrase, false) => vec![
                        ("query", rewrite(&text("query"), k + 1), text("query")),
                        ("pos", rewrite(&text("pos"), k + 1), text("pos")),
                    ],
                    (SynthKind::Augment, _) => {
                        let pos = perturb(&text("pos"), salt.wrapping_add(1));
                        vec![
                            ("query", perturb(&text("query"), salt), text("query")),
                            ("neg", perturb(&pos, salt.wrapping_add(2)), pos.clone()),
                            ("pos", pos, text("pos")),
                        ]
                    }
                    (SynthKind::HardNegative, _) => vec![("neg", perturb(&text("pos"), salt), text("pos"))],
                };
                let mut fields = fields;
                let fault = if rng.random::<f64>() < self.fault_rate {
                    let which = rng.random_range(0..fields.len());
                    let kind = FaultKind::ALL[rng.random_range(0..FaultKind::ALL.len())];
                    let (name, generated, reference) = &mut fields[which];
                    *generated = inject(kind, generated, reference);
                    Some((name.to_string(), kind))
                } else {
                    None
                };
                let item = match (prompt.kind, source.get("text").is_some()) {
                    (SynthKind::HardNegative, _) | (SynthKind::Paraphrase, true) => json!(fields[0].1),
                    _ => Value::Object(fields.into_iter().map(|(k, v, _)| (k.to_string(), json!(v))).collect()),
                };
                StubOutput { item, fault }
            })
            .collect()
    }
}

impl LlmClient for StubClient {
    fn generate(&self, prompt: &PromptSpec) -> Result<Vec<Value>, ApiError> {
        Ok(self.respond(prompt).into_iter().map(|o| o.item).collect())
    }
}

fn inject(kind: FaultKind, generated: &str, reference: &str) -> String {
    match kind {
        FaultKind::DoubleLength => format!("{generated} {generated}"),
        FaultKind::Verbatim => reference.to_string(),
        FaultKind::WrongScript => {
            let to_latin = dominant_script(generated) == Some(Script::Han);
            generated
                .chars()
                .map(|c| match (c.is_alphabetic(), to_latin) {
                    (false, _) => c,
                    (true, true) => char::from(b'a' + (c as u32 % 26) as u8),
                    (true, false) => char::from_u32(0x4E00 + c as u32 % 0x5000).expect("CJK block"),
                })
                .collect()
        }
    }
}

/// Word rotation by `k`; texts without spaces rotate characters. Falls back
/// to [`perturb`] when the rotation reproduces the input.
fn rewrite(text: &str, k: usize) -> String {
    let words: Vec<&str> = text.split_whitespace().collect();
    let rotated = if words.len() > 1 {
        let k = k % words.len();
        words[k..]
            .iter()
            .chain(&words[..k])
            .copied()
            .collect::<Vec<_>>()
            .join(" ")
    } else {
        let chars: Vec<char> = text.trim().chars().collect();
        if chars.is_empty() {
            return String::new();
        }
        let k = k % chars.len();
        chars[k..].iter().chain(&chars[..k]).collect()
    };
    if rotated.trim() == text.trim() {
        perturb(text, k as u64)
    } else {
        rotated
    }
}

/// Replace roughly half of the alphanumeric runs (at least one) by
/// pseudo-words of equal length in the same script.
fn perturb(text: &str, salt: u64) -> String {
    let chars: Vec<char> = text.chars().collect();
    let mut runs = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        if chars[i].is_alphanumeric() {
            let start = i;
            while i < chars.len() && chars[i].is_alphanumeric() {
                i += 1;
            }
            runs.push((start, i));
        } else {
            i += 1;
        }
    }
    let mut out = chars.clone();
    let pick = |r: usize| stable_hash64(&[b"pick", &salt.to_le_bytes(), &(r as u64).to_le_bytes()]) % 2 == 0;
    let mut chosen: Vec<usize> = (0..runs.len()).filter(|&r| pick(r)).collect();
    if chosen.is_empty() && !runs.is_empty() {
        chosen.push((salt as usize) % runs.len());
    }
    for r in chosen {
        let (s, e) = runs[r];
        for (j, slot) in out[s..e].iter_mut().enumerate() {
            let h = stable_hash64(&[b"char", &salt.to_le_bytes(), &((s + j) as u64).to_le_bytes()]);
            let orig = *slot;
            *slot = pseudo_char(orig, h);
            if *slot == orig {
                *slot = pseudo_char(orig, h.wrapping_add(1));
            }
        }
    }
    out.into_iter().collect()
}

fn pseudo_char(like: char, h: u64) -> char {
    if like.is_ascii_digit() {
        char::from(b'0' + (h % 10) as u8)
    } else if matches!(like as u32, 0x3400..=0x9FFF) {
        char::from_u32(0x4E00 + (h % 0x5000) as u32).expect("CJK block")
    } else {
        char::from(b'a' + (h % 26) as u8)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::TrainingSample;
    use crate::synthesis::{build_prompt, validate_synthesis, ConstraintSet};

    fn sample() -> TrainingSample {
        TrainingSample::retrieval(
            "d",
            "which fruit ripens fastest in warm weather",
            "bananas ripen within days when the air is warm and humid",
        )
    }

    #[test]
    fn clean_outputs_pass_validation() {
        for kind in [SynthKind::Paraphrase, SynthKind::Augment, SynthKind::HardNegative] {
            let c = ConstraintSet::for_kind(kind);
            let p = build_prompt(kind, &sample(), &c).unwrap().with_expected_outputs(5);
            let outs = StubClient::new(1).respond(&p);
            assert_eq!(outs.len(), 5);
            for o in outs {
                let check = |orig: &str, key: Option<&str>| {
                    let g = match key {
                        Some(k) => o.item[k].as_str().unwrap().to_string(),
                        None => o.item.as_str().unwrap().to_string(),
                    };
                    assert!(validate_synthesis(orig, &g, &c).passed, "{kind:?} {g}");
                };
                match kind {
                    SynthKind::Paraphrase => {
                        check(&sample().query, Some("query"));
                        check(&sample().positive, Some("pos"));
                    }
                    SynthKind::Augment => {
                        check(&sample().query, Some("query"));
                        check(&sample().positive, Some("pos"));
                        check(o.item["pos"].as_str().unwrap(), Some("neg"));
                    }
                    SynthKind::HardNegative => check(&sample().positive, None),
                }
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let c = ConstraintSet::augment();
        let p = build_prompt(SynthKind::Augment, &sample(), &c)
            .unwrap()
            .with_expected_outputs(3);
        assert_eq!(StubClient::new(4).respond(&p), StubClient::new(4).respond(&p));
        assert_ne!(StubClient::new(4).respond(&p), StubClient::new(5).respond(&p));
    }

    #[test]
    fn injected_faults_fail_validation() {
        let c = ConstraintSet::hard_negative();
        let p = build_prompt(SynthKind::HardNegative, &sample(), &c)
            .unwrap()
            .with_expected_outputs(200);
        let outs = StubClient::new(9).with_fault_rate(0.5).respond(&p);
        let faulty = outs.iter().filter(|o| o.fault.is_some()).count();
        assert!(faulty > 50 && faulty < 150);
        for o in outs {
            let r = validate_synthesis(&sample().positive, o.item.as_str().unwrap(), &c);
            assert_eq!(r.passed, o.fault.is_none(), "{o:?}");
        }
    }

    #[test]
    fn han_text_is_handled() {
        assert_ne!(rewrite("数据集", 1), "数据集");
        let p = perturb("数据集 合成", 3);
        assert_eq!(p.chars().count(), 6);
        assert_eq!(dominant_script(&p), Some(Script::Han));
    }
}
