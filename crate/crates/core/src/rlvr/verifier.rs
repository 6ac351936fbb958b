use std::io::Write;
use std::path::PathBuf;
use std::process::{Command, Stdio};

use serde::{Deserialize, Serialize};

use crate::error::{Result, SrmError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub prompt: String,
    pub answer: String,
}

/// Decides whether a decoded completion answers a question.
pub trait Verifier: Send + Sync {
    fn verify(&self, question: &Question, output: &str) -> Result<bool>;
}

/// Output equals the answer after trimming whitespace.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExactMatch;

impl Verifier for ExactMatch {
    fn verify(&self, question: &Question, output: &str) -> Result<bool> {
        Ok(output.trim() == question.answer.trim())
    }
}

/// The last number in the output equals the last number in the answer.
#[derive(Debug, Clone, Copy, Default)]
pub struct LastNumberMatch;

/// Last decimal number in `text`, with an optional leading minus, commas
/// between digits ignored.
pub fn last_number(text: &str) -> Option<f64> {
    let chars: Vec<char> = text.chars().collect();
    let mut end = chars.len();
    loop {
        while end > 0 && !chars[end - 1].is_ascii_digit() {
            end -= 1;
        }
        if end == 0 {
            return None;
        }
        let mut start = end;
        while start > 0 {
            let c = chars[start - 1];
            let digit_around = |i: usize| i < chars.len() && chars[i].is_ascii_digit();
            if c.is_ascii_digit() || ((c == '.' || c == ',') && start >= 2 && chars[start - 2].is_ascii_digit() && digit_around(start)) {
                start -= 1;
            } else {
                break;
            }
        }
        if start > 0 && chars[start - 1] == '-' {
            start -= 1;
        }
        let s: String = chars[start..end].iter().filter(|c| **c != ',').collect();
        if let Ok(v) = s.parse::<f64>() {
            return Some(v);
        }
        end = start;
    }
}

impl Verifier for LastNumberMatch {
    fn verify(&self, question: &Question, output: &str) -> Result<bool> {
        let want = last_number(&question.answer)
            .ok_or_else(|| SrmError::Verifier(format!("answer of {} holds no number", question.id)))?;
        Ok(last_number(output) == Some(want))
    }
}

/// External program: receives the question id as its last argument and the
/// output text on stdin, and prints `1` or `0`.
#[derive(Debug, Clone)]
pub struct CommandVerifier {
    pub program: PathBuf,
    pub args: Vec<String>,
}

impl Verifier for CommandVerifier {
    fn verify(&self, question: &Question, output: &str) -> Result<bool> {
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .arg(&question.id)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| SrmError::Verifier(format!("spawning {}: {e}", self.program.display())))?;
        child
            .stdin
            .take()
            .expect("stdin is piped")
            .write_all(output.as_bytes())
            .map_err(|e| SrmError::Verifier(format!("writing to verifier: {e}")))?;
        let out = child
            .wait_with_output()
            .map_err(|e| SrmError::Verifier(format!("waiting for verifier: {e}")))?;
        if !out.status.success() {
            return Err(SrmError::Verifier(format!("verifier exited with {}", out.status)));
        }
        match String::from_utf8_lossy(&out.stdout).trim() {
            "1" => Ok(true),
            "0" => Ok(false),
            other => Err(SrmError::Verifier(format!("verifier printed {other:?}, expected 0 or 1"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(answer: &str) -> Question {
        Question {
            id: "q".into(),
            prompt: String::new(),
            answer: answer.into(),
        }
    }

    #[test]
    fn last_number_parsing() {
        assert_eq!(last_number("so 3 + 4 = 7"), Some(7.0));
        assert_eq!(last_number("total: 1,234.5 apples."), Some(1234.5));
        assert_eq!(last_number("it is -12"), Some(-12.0));
        assert_eq!(last_number("none"), None);
        assert_eq!(last_number("7."), Some(7.0));
    }

    #[test]
    fn builtins() {
        assert!(ExactMatch.verify(&q("17"), " 17\n").unwrap());
        assert!(!ExactMatch.verify(&q("17"), "017").unwrap());
        assert!(LastNumberMatch.verify(&q("#### 42"), "I think 40, no, 42").unwrap());
        assert!(!LastNumberMatch.verify(&q("42"), "42 or 43").unwrap());
        assert!(LastNumberMatch.verify(&q("none"), "1").is_err());
    }

    #[test]
    fn command_verifier_protocol() {
        let v = CommandVerifier {
            program: "sh".into(),
            args: vec!["-c".into(), "read x; [ \"$x\" = \"$0\" ] && echo 1 || echo 0".into()],
        };
        let mut question = q("");
        question.id = "abc".into();
        assert!(v.verify(&question, "abc\n").unwrap());
        assert!(!v.verify(&question, "xyz\n").unwrap());
        let broken = CommandVerifier {
            program: "/nonexistent/verifier".into(),
            args: vec![],
        };
        assert!(broken.verify(&question, "").is_err());
    }
}
