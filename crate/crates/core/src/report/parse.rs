//! Section splitting for generated reports and score extraction for
//! evaluator replies.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::prompts::SECTIONS;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sections {
    pub extent: String,
    pub depth: String,
    pub risk: String,
    pub impact: String,
}

impl Sections {
    fn slot(&mut self, i: usize) -> &mut String {
        match i {
            0 => &mut self.extent,
            1 => &mut self.depth,
            2 => &mut self.risk,
            _ => &mut self.impact,
        }
    }

    pub fn complete(&self) -> bool {
        [&self.extent, &self.depth, &self.risk, &self.impact].iter().all(|s| !s.is_empty())
    }
}

const DECOR: &str = r"(?:\*\*|__)?";

static LENIENT_HEADERS: LazyLock<[Regex; 2]> = LazyLock::new(|| {
    let prefix = format!(r"(?i)^\s*(?:#{{1,6}}\s*)?{DECOR}\s*(?:\d+\s*[.)]\s*)?{DECOR}\s*(extent|depth|risks?|impacts?)\b");
    [
        // `Header words: text`
        Regex::new(&format!(r"{prefix}[^:\n]{{0,24}}:\s*{DECOR}\s*(.*)$")).expect("valid regex"),
        // a header alone on its line
        Regex::new(&format!(r"{prefix}[^:.\n]{{0,24}}?{DECOR}\s*$()")).expect("valid regex"),
    ]
});

fn exact_header(line: &str) -> Option<(usize, &str)> {
    SECTIONS
        .iter()
        .enumerate()
        .find_map(|(i, name)| line.strip_prefix(name).and_then(|r| r.strip_prefix(':')).map(|rest| (i, rest)))
}

fn lenient_header(line: &str) -> Option<(usize, &str)> {
    let caps = LENIENT_HEADERS.iter().find_map(|re| re.captures(line))?;
    let word = caps.get(1)?.as_str().to_ascii_lowercase();
    let i = SECTIONS.iter().position(|s| word.starts_with(&s.to_ascii_lowercase()))?;
    Some((i, caps.get(2).map_or("", |m| m.as_str())))
}

fn split_with(text: &str, header: impl Fn(&str) -> Option<(usize, &str)>) -> Option<Sections> {
    let mut out = Sections::default();
    let mut current: Option<usize> = None;
    let mut seen = [false; 4];
    for line in text.lines() {
        if let Some((i, rest)) = header(line) {
            if seen[i] {
                return None;
            }
            seen[i] = true;
            current = Some(i);
            let rest = rest.trim();
            if !rest.is_empty() {
                out.slot(i).push_str(rest);
            }
            continue;
        }
        if let Some(i) = current {
            let line = line.trim();
            if !line.is_empty() {
                let slot = out.slot(i);
                if !slot.is_empty() {
                    slot.push('\n');
                }
                slot.push_str(line);
            }
        }
    }
    out.complete().then_some(out)
}

/// Splits a report on `Extent:`, `Depth:`, `Risk:` and `Impact:` headers.
/// Falls back to case-insensitive headers with numbering or markdown
/// decoration. `None` when any section is missing or empty.
pub fn parse_sections(text: &str) -> Option<Sections> {
    split_with(text, exact_header).or_else(|| split_with(text, lenient_header))
}

static SCORE_PATTERNS: LazyLock<[Regex; 3]> = LazyLock::new(|| {
    [
        Regex::new(r"(?i)\bscore\b\s*(?:is|of|was|=|:)?\s*:?\s*\**\s*(\d+(?:\.\d+)?)\s*(?:/\s*10|out of 10)?").expect("valid regex"),
        Regex::new(r"(?i)(\d+(?:\.\d+)?)\s*(?:/\s*10\b|out of 10\b)").expect("valid regex"),
        Regex::new(r"(?i)\brate\b[^.\d]{0,30}?(\d+(?:\.\d+)?)").expect("valid regex"),
    ]
});

/// Score and explanation from an evaluator reply.
pub fn parse_score(text: &str) -> Result<(u8, String)> {
    let found = SCORE_PATTERNS.iter().find_map(|re| re.captures(text));
    let Some(caps) = found else {
        return Err(Error::ScoreParse(format!("no score in {:?}", truncate(text))));
    };
    let m = caps.get(1).expect("group 1");
    let value: f64 = m.as_str().parse().map_err(|_| Error::ScoreParse(m.as_str().into()))?;
    if value.fract() != 0.0 || !(1.0..=10.0).contains(&value) {
        return Err(Error::ScoreParse(format!("score {value} outside 1..10")));
    }
    let whole = caps.get(0).expect("group 0");
    let explanation = if !text[..whole.start()].chars().any(char::is_alphanumeric) {
        text[whole.end()..].trim_start_matches(['.', ',', ':', ';', '*', ' ', '\n']).trim().to_string()
    } else {
        text.trim().to_string()
    };
    Ok((value as u8, explanation))
}

fn truncate(s: &str) -> String {
    s.chars().take(80).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_headers() {
        let s = parse_sections("Extent:\nmost of the road\nDepth: ankle deep\nRisk:\nslippery\n\nfalls\nImpact:\nslow traffic").unwrap();
        assert_eq!(s.extent, "most of the road");
        assert_eq!(s.depth, "ankle deep");
        assert_eq!(s.risk, "slippery\nfalls");
        assert_eq!(s.impact, "slow traffic");
    }

    #[test]
    fn lenient_headers() {
        let text = "Here is the report.\n## 1. EXTENT\nleft lane\n**2) Depth:** 10 cm\n3. Risks:\nstalling\n### Impact assessment:\ndelays";
        let s = parse_sections(text).unwrap();
        assert_eq!(s.extent, "left lane");
        assert_eq!(s.depth, "10 cm");
        assert_eq!(s.risk, "stalling");
        assert_eq!(s.impact, "delays");
    }

    #[test]
    fn missing_or_empty_sections_fail() {
        assert!(parse_sections("Extent: a\nDepth: b\nRisk: c").is_none());
        assert!(parse_sections("Extent: a\nDepth:\nRisk: c\nImpact: d").is_none());
        assert!(parse_sections("no structure at all").is_none());
    }

    #[test]
    fn prose_mentioning_a_section_word_is_not_a_header() {
        let s = parse_sections("Extent:\nthe depth of water rises near the curb\nDepth: 5 cm\nRisk: low\nImpact: none").unwrap();
        assert_eq!(s.extent, "the depth of water rises near the curb");
    }

    #[test]
    fn score_fixtures() {
        let cases = [
            ("Score: 8. The report is comprehensive.", 8, "The report is comprehensive."),
            ("score: 10/10\nExcellent detail.", 10, "Excellent detail."),
            ("Overall, I would assign the textual report a score of 8 because it covers the extent.", 8, ""),
            ("The score is 7 out of 10.", 7, ""),
            ("**Score:** 6\nMisses depth.", 6, "Misses depth."),
            ("I rate this report 9/10.", 9, ""),
            ("Score: 1", 1, ""),
        ];
        for (text, want, expl) in cases {
            let (got, e) = parse_score(text).unwrap_or_else(|err| panic!("{text}: {err}"));
            assert_eq!(got, want, "{text}");
            if !expl.is_empty() {
                assert_eq!(e, expl);
            }
        }
    }

    #[test]
    fn score_errors() {
        for text in ["no digits here", "Score: 0", "Score: 11", "score: 7.5", ""] {
            assert!(matches!(parse_score(text), Err(Error::ScoreParse(_))), "{text}");
        }
    }
}
