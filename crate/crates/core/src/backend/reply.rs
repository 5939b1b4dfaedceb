use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ReplyError {
    #[error("no JSON object found in reply")]
    NoJsonObject,
    #[error("reply object has no \"predictions\" array")]
    MissingPredictions,
    #[error("expected {expected} predictions, got {got}")]
    WrongLength { expected: usize, got: usize },
    #[error("prediction {index} is not a number")]
    NonNumeric { index: usize },
    #[error("prediction {index} is negative ({value})")]
    NegativeValue { index: usize, value: f64 },
    #[error("prediction {index} is too large ({value})")]
    OutOfRange { index: usize, value: f64 },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ReplyPolicy {
    /// Clamp negative values to zero instead of rejecting them.
    pub clamp_negative: bool,
}

/// Strict parse: negatives are rejected.
pub fn parse_reply(raw: &str, expected_u: usize) -> Result<Vec<u32>, ReplyError> {
    parse_reply_with(raw, expected_u, &ReplyPolicy::default())
}

/// Extracts the first well-formed JSON object in `raw` and validates its
/// `predictions` array. Fractions round half-up.
pub fn parse_reply_with(raw: &str, expected_u: usize, policy: &ReplyPolicy) -> Result<Vec<u32>, ReplyError> {
    let object = first_object(raw).ok_or(ReplyError::NoJsonObject)?;
    let predictions = object
        .get("predictions")
        .and_then(Value::as_array)
        .ok_or(ReplyError::MissingPredictions)?;
    if predictions.len() != expected_u {
        return Err(ReplyError::WrongLength {
            expected: expected_u,
            got: predictions.len(),
        });
    }
    predictions
        .iter()
        .enumerate()
        .map(|(index, v)| {
            let value = v.as_f64().ok_or(ReplyError::NonNumeric { index })?;
            if value < 0.0 {
                if policy.clamp_negative {
                    return Ok(0);
                }
                return Err(ReplyError::NegativeValue { index, value });
            }
            let rounded = (value + 0.5).floor();
            if rounded > f64::from(u32::MAX) {
                return Err(ReplyError::OutOfRange { index, value });
            }
            Ok(rounded as u32)
        })
        .collect()
}

fn first_object(raw: &str) -> Option<serde_json::Map<String, Value>> {
    raw.match_indices('{').find_map(|(i, _)| {
        let mut stream = serde_json::Deserializer::from_str(&raw[i..]).into_iter::<Value>();
        match stream.next() {
            Some(Ok(Value::Object(map))) => Some(map),
            _ => None,
        }
    })
}

/// The reply a well-behaved model sends: `{"task_id": ..., "predictions": [...]}`.
pub fn format_reply<T: serde::Serialize>(task_id: &str, predictions: &[T]) -> String {
    serde_json::json!({ "task_id": task_id, "predictions": predictions }).to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn plain_reply() {
        assert_eq!(parse_reply(r#"{"predictions":[10,12,11]}"#, 3).unwrap(), vec![10, 12, 11]);
    }

    #[test]
    fn prose_wrapped_reply() {
        let raw = r#"Sure! Here is the forecast: {"predictions":[0,0]}"#;
        assert_eq!(parse_reply(raw, 2).unwrap(), vec![0, 0]);
        let braces = r#"Set {x} aside. {"task_id":"a","predictions":[1]} done {"predictions":[9]}"#;
        assert_eq!(parse_reply(braces, 1).unwrap(), vec![1]);
    }

    #[test]
    fn distinct_errors() {
        assert_eq!(
            parse_reply(r#"{"predictions":[5,-1]}"#, 2),
            Err(ReplyError::NegativeValue { index: 1, value: -1.0 })
        );
        assert_eq!(
            parse_reply(r#"{"predictions":[5]}"#, 2),
            Err(ReplyError::WrongLength { expected: 2, got: 1 })
        );
        assert_eq!(parse_reply("I cannot help with that.", 2), Err(ReplyError::NoJsonObject));
        assert_eq!(parse_reply(r#"{"forecast":[1,2]}"#, 2), Err(ReplyError::MissingPredictions));
        assert_eq!(
            parse_reply(r#"{"predictions":[1,"two"]}"#, 2),
            Err(ReplyError::NonNumeric { index: 1 })
        );
        assert!(matches!(
            parse_reply(r#"{"predictions":[1e20]}"#, 1),
            Err(ReplyError::OutOfRange { index: 0, .. })
        ));
    }

    #[test]
    fn rounding_is_half_up() {
        assert_eq!(parse_reply(r#"{"predictions":[2.5,2.49,0.5,7.0]}"#, 4).unwrap(), vec![3, 2, 1, 7]);
    }

    #[test]
    fn clamping_is_opt_in() {
        let lenient = ReplyPolicy { clamp_negative: true };
        assert_eq!(parse_reply_with(r#"{"predictions":[-3,4]}"#, 2, &lenient).unwrap(), vec![0, 4]);
    }

    #[derive(Debug, Clone)]
    enum Entry {
        Num(f64),
        Text,
        Null,
    }

    fn entry() -> impl Strategy<Value = Entry> {
        prop_oneof![
            8 => (-1000.0f64..1000.0).prop_map(Entry::Num),
            4 => (-50i32..500).prop_map(|v| Entry::Num(f64::from(v))),
            1 => Just(Entry::Text),
            1 => Just(Entry::Null),
        ]
    }

    fn render_entry(e: &Entry) -> String {
        match e {
            Entry::Num(v) => format!("{v}"),
            Entry::Text => "\"many\"".into(),
            Entry::Null => "null".into(),
        }
    }

    proptest! {
        #[test]
        fn format_then_parse(preds in proptest::collection::vec(0u32..1_000_000, 1..30)) {
            let raw = format_reply("t", &preds);
            prop_assert_eq!(parse_reply(&raw, preds.len()).unwrap(), preds);
        }

        #[test]
        fn adversarial_replies_never_yield_negatives(
            prefix in "[^{}]{0,40}",
            suffix in ".{0,40}",
            entries in proptest::collection::vec(entry(), 0..12),
            expected in 0usize..12,
            wrap in any::<bool>(),
        ) {
            let array = entries.iter().map(render_entry).collect::<Vec<_>>().join(",");
            let body = if wrap {
                format!("{{\"task_id\":\"x\",\"predictions\":[{array}]}}")
            } else {
                format!("[{array}]")
            };
            let raw = format!("{prefix}{body}{suffix}");
            match parse_reply(&raw, expected) {
                Ok(values) => {
                    prop_assert!(wrap);
                    prop_assert_eq!(values.len(), expected);
                    for (v, e) in values.iter().zip(&entries) {
                        match e {
                            Entry::Num(x) => {
                                prop_assert!(*x >= 0.0);
                                prop_assert_eq!(f64::from(*v), (x + 0.5).floor());
                            }
                            _ => prop_assert!(false, "non-numeric entry accepted"),
                        }
                    }
                }
                Err(ReplyError::NegativeValue { value, .. }) => prop_assert!(value < 0.0),
                Err(ReplyError::WrongLength { got, .. }) => prop_assert_eq!(got, entries.len()),
                Err(_) => {}
            }
        }
    }
}
