//! Questionnaires with configurable scoring, and visual analogue pain scale capture.

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::knowledge::VasReport;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AssessmentError {
    #[error("invalid test: {0}")]
    InvalidTest(String),
    #[error("response is for `{found}`, expected `{expected}`")]
    WrongTest { expected: String, found: String },
    #[error("missing answers for questions {0:?}")]
    Incomplete(Vec<usize>),
    #[error("question {question}: answer {answer} out of range")]
    OutOfRange { question: usize, answer: usize },
    #[error("mark {mark} outside [0, {length}]")]
    MarkOutOfRange { mark: f64, length: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Answer {
    pub text: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub text: String,
    pub answers: Vec<Answer>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value")]
pub enum Scoring {
    Sum,
    /// Number of chosen answers worth exactly this score.
    CountEqual(f64),
    /// Sum as a percentage of a fixed value.
    PercentOf(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoTest {
    pub name: String,
    pub questions: Vec<Question>,
    pub scoring: Scoring,
}

impl AutoTest {
    pub fn validate(&self) -> Result<(), AssessmentError> {
        if self.name.trim().is_empty() {
            return Err(AssessmentError::InvalidTest("empty name".into()));
        }
        if self.questions.is_empty() {
            return Err(AssessmentError::InvalidTest("no questions".into()));
        }
        for (i, q) in self.questions.iter().enumerate() {
            if q.answers.len() < 2 {
                return Err(AssessmentError::InvalidTest(format!(
                    "question {i} needs at least two answers"
                )));
            }
            if q.answers.iter().any(|a| !a.score.is_finite()) {
                return Err(AssessmentError::InvalidTest(format!(
                    "question {i} has a non-finite score"
                )));
            }
        }
        if let Scoring::PercentOf(v) = self.scoring {
            if !(v > 0.0) {
                return Err(AssessmentError::InvalidTest("PercentOf value must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Chosen answer index per question; `None` marks an unanswered question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResponse {
    pub test: String,
    pub answers: Vec<Option<usize>>,
    pub date: NaiveDate,
}

/// Scores of the chosen answers, in question order.
pub fn chosen_scores(test: &AutoTest, resp: &TestResponse) -> Result<Vec<f64>, AssessmentError> {
    test.validate()?;
    if resp.test != test.name {
        return Err(AssessmentError::WrongTest {
            expected: test.name.clone(),
            found: resp.test.clone(),
        });
    }
    let missing: Vec<usize> = (0..test.questions.len())
        .filter(|&i| resp.answers.get(i).copied().flatten().is_none())
        .collect();
    if !missing.is_empty() {
        return Err(AssessmentError::Incomplete(missing));
    }
    test.questions
        .iter()
        .zip(&resp.answers)
        .enumerate()
        .map(|(i, (q, a))| {
            let a = a.expect("checked above");
            q.answers
                .get(a)
                .map(|ans| ans.score)
                .ok_or(AssessmentError::OutOfRange { question: i, answer: a })
        })
        .collect()
}

pub fn score_autotest(test: &AutoTest, resp: &TestResponse) -> Result<f64, AssessmentError> {
    let scores = chosen_scores(test, resp)?;
    let sum: f64 = scores.iter().sum();
    Ok(match test.scoring {
        Scoring::Sum => sum,
        Scoring::CountEqual(s) => scores.iter().filter(|&&x| x == s).count() as f64,
        Scoring::PercentOf(v) => 100.0 * sum / v,
    })
}

/// Pain value in [0, 10] for a mark placed `mark` along a line of `length`.
pub fn vas_from_mark(mark: f64, length: f64) -> Result<f64, AssessmentError> {
    if !(length > 0.0) || !(0.0..=length).contains(&mark) {
        return Err(AssessmentError::MarkOutOfRange { mark, length });
    }
    Ok((10.0 * (mark / length)).clamp(0.0, 10.0))
}

/// Post-session questionnaire used by the demo data.
pub fn post_session_test() -> AutoTest {
    let scale = |labels: [&str; 4]| {
        labels
            .iter()
            .enumerate()
            .map(|(i, t)| Answer {
                text: t.to_string(),
                score: i as f64,
            })
            .collect()
    };
    let q = |text: &str| Question {
        text: text.into(),
        answers: scale(["None", "Mild", "Moderate", "Severe"]),
    };
    AutoTest {
        name: "PostSession".into(),
        questions: vec![
            q("Pain during the exercises"),
            q("Stiffness after the session"),
            q("Fatigue after the session"),
            q("Difficulty following the instructions"),
        ],
        scoring: Scoring::Sum,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_with(scores: &[&[f64]], scoring: Scoring) -> AutoTest {
        AutoTest {
            name: "t".into(),
            questions: scores
                .iter()
                .map(|s| Question {
                    text: "q".into(),
                    answers: s
                        .iter()
                        .map(|&score| Answer {
                            text: "a".into(),
                            score,
                        })
                        .collect(),
                })
                .collect(),
            scoring,
        }
    }

    fn resp(answers: Vec<Option<usize>>) -> TestResponse {
        TestResponse {
            test: "t".into(),
            answers,
            date: NaiveDate::from_ymd_opt(2024, 1, 1).unwrap(),
        }
    }

    #[test]
    fn scoring_examples() {
        let row: &[f64] = &[0.0, 1.0, 2.0, 3.0];
        let qs = &[row; 4];
        let sum = test_with(qs, Scoring::Sum);
        assert_eq!(
            score_autotest(&sum, &resp(vec![Some(2), Some(1), Some(0), Some(3)])).unwrap(),
            6.0
        );
        let count = test_with(qs, Scoring::CountEqual(0.0));
        assert_eq!(
            score_autotest(&count, &resp(vec![Some(2), Some(0), Some(0), Some(3)])).unwrap(),
            2.0
        );
        let ten: &[f64] = &[0.0, 10.0];
        let tens = &[ten; 2];
        let pct = test_with(tens, Scoring::PercentOf(50.0));
        assert_eq!(score_autotest(&pct, &resp(vec![Some(1), Some(1)])).unwrap(), 40.0);
    }

    #[test]
    fn response_errors() {
        let bin: &[f64] = &[0.0, 1.0];
        let t = test_with(&[bin; 3], Scoring::Sum);
        assert_eq!(
            score_autotest(&t, &resp(vec![Some(0), None])),
            Err(AssessmentError::Incomplete(vec![1, 2]))
        );
        assert_eq!(
            score_autotest(&t, &resp(vec![Some(0), Some(2), Some(0)])),
            Err(AssessmentError::OutOfRange { question: 1, answer: 2 })
        );
        assert!(matches!(
            test_with(&[&[0.0]], Scoring::Sum).validate(),
            Err(AssessmentError::InvalidTest(_))
        ));
        assert!(test_with(&[&[0.0, 1.0]], Scoring::PercentOf(0.0)).validate().is_err());
        assert!(post_session_test().validate().is_ok());
    }

    #[test]
    fn vas_marks() {
        assert_eq!(vas_from_mark(0.0, 10.0).unwrap(), 0.0);
        assert_eq!(vas_from_mark(10.0, 10.0).unwrap(), 10.0);
        assert_eq!(vas_from_mark(40.0, 100.0).unwrap(), 4.0);
        assert!(vas_from_mark(-0.1, 10.0).is_err());
        assert!(vas_from_mark(10.1, 10.0).is_err());
        assert!(vas_from_mark(0.0, 0.0).is_err());
    }
}
