//! Mechanical checks for generated text: character-length band, dominant
//! script, and verbatim copies.

use serde::{Deserialize, Serialize};

use super::ConstraintSet;

/// Coarse Unicode script of a letter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Script {
    Latin,
    Han,
    Kana,
    Hangul,
    Cyrillic,
    Greek,
    Arabic,
    Other,
}

const SCRIPTS: [Script; 8] = [
    Script::Latin,
    Script::Han,
    Script::Kana,
    Script::Hangul,
    Script::Cyrillic,
    Script::Greek,
    Script::Arabic,
    Script::Other,
];

pub fn script_of(ch: char) -> Option<Script> {
    if !ch.is_alphabetic() {
        return None;
    }
    Some(match ch as u32 {
        0x0041..=0x024F | 0x1E00..=0x1EFF => Script::Latin,
        0x0370..=0x03FF => Script::Greek,
        0x0400..=0x052F => Script::Cyrillic,
        0x0600..=0x06FF | 0x0750..=0x077F => Script::Arabic,
        0x3040..=0x30FF => Script::Kana,
        0xAC00..=0xD7AF | 0x1100..=0x11FF => Script::Hangul,
        0x3400..=0x4DBF | 0x4E00..=0x9FFF | 0xF900..=0xFAFF | 0x20000..=0x2FA1F => Script::Han,
        _ => Script::Other,
    })
}

/// Script with the most letters; ties go to the earlier script in
/// declaration order. `None` when the text has no letters.
pub fn dominant_script(text: &str) -> Option<Script> {
    let mut counts = [0usize; SCRIPTS.len()];
    for s in text.chars().filter_map(script_of) {
        counts[SCRIPTS.iter().position(|&x| x == s).expect("listed")] += 1;
    }
    let (best, &n) = counts
        .iter()
        .enumerate()
        .rev()
        .max_by_key(|(_, &n)| n)
        .expect("non-empty");
    (n > 0).then_some(SCRIPTS[best])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub passed: bool,
    /// generated / original, in characters
    pub length_ratio: f64,
    pub language_match: bool,
    pub identical_to_source: bool,
    pub rejection_reasons: Vec<String>,
}

/// Check `generated` against `original`: the character-length ratio must lie
/// in `[1-d, 1+d]`, the dominant script must match (when `keep_language` is
/// set), and the two must differ after trimming.
pub fn validate_synthesis(original: &str, generated: &str, constraints: &ConstraintSet) -> ValidationReport {
    let orig_len = original.chars().count();
    let gen_len = generated.chars().count();
    let length_ratio = if orig_len == 0 {
        f64::INFINITY
    } else {
        gen_len as f64 / orig_len as f64
    };
    let d = constraints.max_length_deviation;
    let language_match = dominant_script(original) == dominant_script(generated);
    let identical_to_source = original.trim() == generated.trim();

    let mut reasons = Vec::new();
    if generated.trim().is_empty() {
        reasons.push("empty".to_string());
    }
    // the band edges are compared with a little slack so that 115/100 passes
    let slack = 1e-12;
    if !(length_ratio >= 1.0 - d - slack && length_ratio <= 1.0 + d + slack) {
        reasons.push("length".to_string());
    }
    if constraints.keep_language && !language_match {
        reasons.push("language".to_string());
    }
    if identical_to_source {
        reasons.push("identical".to_string());
    }
    ValidationReport {
        passed: reasons.is_empty(),
        length_ratio,
        language_match,
        identical_to_source,
        rejection_reasons: reasons,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn text(n: usize) -> String {
        "abcdefghij".chars().cycle().take(n).collect()
    }

    #[test]
    fn length_band() {
        let c = ConstraintSet::paraphrase();
        let r = validate_synthesis(&text(100), &text(110).to_uppercase(), &c);
        assert!(r.passed, "{r:?}");
        assert!((r.length_ratio - 1.10).abs() < 1e-12);
        let r = validate_synthesis(&text(100), &text(115).to_uppercase(), &c);
        assert!(r.passed, "{r:?}");
        let r = validate_synthesis(&text(100), &text(130).to_uppercase(), &c);
        assert!(!r.passed);
        assert_eq!(r.rejection_reasons, ["length"]);
    }

    #[test]
    fn script_mismatch() {
        let c = ConstraintSet::paraphrase();
        let han: String = "数据集合".chars().cycle().take(100).collect();
        let r = validate_synthesis(&text(100), &han, &c);
        assert!(!r.language_match);
        assert_eq!(r.rejection_reasons, ["language"]);
    }

    #[test]
    fn verbatim_copy() {
        let r = validate_synthesis("same text", " same text ", &ConstraintSet::paraphrase());
        assert!(r.identical_to_source);
        assert!(r.rejection_reasons.contains(&"identical".to_string()));
    }

    #[test]
    fn dominant_script_majority() {
        assert_eq!(dominant_script("hello 世界"), Some(Script::Latin));
        assert_eq!(dominant_script("ok 数据集合"), Some(Script::Han));
        assert_eq!(dominant_script("123 ?!"), None);
        assert_eq!(dominant_script("ab 数据"), Some(Script::Latin));
    }
}
