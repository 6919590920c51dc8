//! Operator spatial commands.
//!
//! ```text
//! goto <x> <y> [<z>]
//! follow [at] <d> m [distance]
//! stop
//! ```
//!
//! Keywords are case-insensitive; numbers are decimal meters.

use nalgebra::Vector3;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
#[error("unrecognized command: unexpected {token:?} at byte {position}")]
pub struct UnrecognizedCommand {
    /// Byte offset of the offending token, or the input length when a token is missing.
    pub position: usize,
    /// Empty when the input ended early.
    pub token: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Action {
    Goto { target: Vector3<f64> },
    Follow { distance: f64 },
    Stop,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpatialCommand {
    pub action: Action,
    pub raw: String,
}

#[derive(Debug, Serialize)]
pub struct CommandJson<'a> {
    pub kind: &'static str,
    pub target: Option<[f64; 3]>,
    pub follow_distance: Option<f64>,
    pub raw: &'a str,
}

impl SpatialCommand {
    pub fn kind(&self) -> &'static str {
        match self.action {
            Action::Goto { .. } => "GOTO",
            Action::Follow { .. } => "FOLLOW",
            Action::Stop => "STOP",
        }
    }

    pub fn to_json(&self) -> CommandJson<'_> {
        let (target, follow_distance) = match self.action {
            Action::Goto { target } => (Some(target.into()), None),
            Action::Follow { distance } => (None, Some(distance)),
            Action::Stop => (None, None),
        };
        CommandJson { kind: self.kind(), target, follow_distance, raw: &self.raw }
    }
}

impl std::fmt::Display for SpatialCommand {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.action {
            Action::Goto { target: t } => write!(f, "goto {} {} {}", t.x, t.y, t.z),
            Action::Follow { distance } => write!(f, "follow at {distance} m distance"),
            Action::Stop => f.write_str("stop"),
        }
    }
}

struct Tokens<'a> {
    text: &'a str,
    items: Vec<(usize, &'a str)>,
    at: usize,
}

impl<'a> Tokens<'a> {
    fn new(text: &'a str) -> Self {
        let mut items = Vec::new();
        let mut start = None;
        for (i, c) in text.char_indices().chain(std::iter::once((text.len(), ' '))) {
            match (c.is_whitespace(), start) {
                (true, Some(s)) => {
                    items.push((s, &text[s..i]));
                    start = None;
                }
                (false, None) => start = Some(i),
                _ => {}
            }
        }
        Self { text, items, at: 0 }
    }

    fn peek(&self) -> Option<(usize, &'a str)> {
        self.items.get(self.at).copied()
    }

    fn error(&self) -> UnrecognizedCommand {
        match self.peek() {
            Some((position, token)) => UnrecognizedCommand { position, token: token.to_string() },
            None => UnrecognizedCommand { position: self.text.len(), token: String::new() },
        }
    }

    fn keyword(&mut self, word: &str) -> bool {
        let hit = self.peek().is_some_and(|(_, t)| t.eq_ignore_ascii_case(word));
        self.at += hit as usize;
        hit
    }

    fn number(&mut self) -> Option<f64> {
        self.number_where(|_| true)
    }

    fn number_where(&mut self, accept: impl Fn(f64) -> bool) -> Option<f64> {
        let v = self.peek().and_then(|(_, t)| t.parse::<f64>().ok()).filter(|v| v.is_finite() && accept(*v))?;
        self.at += 1;
        Some(v)
    }

    fn finish(&self) -> Result<(), UnrecognizedCommand> {
        if self.at == self.items.len() {
            Ok(())
        } else {
            Err(self.error())
        }
    }
}

/// Parses operator text. `default_z` fills in a missing GOTO height.
pub fn parse_command(text: &str, default_z: f64) -> Result<SpatialCommand, UnrecognizedCommand> {
    let mut tk = Tokens::new(text);
    let action = if tk.keyword("goto") {
        let x = tk.number().ok_or_else(|| tk.error())?;
        let y = tk.number().ok_or_else(|| tk.error())?;
        let z = tk.number().unwrap_or(default_z);
        Action::Goto { target: Vector3::new(x, y, z) }
    } else if tk.keyword("follow") {
        tk.keyword("at");
        let distance = tk.number_where(|d| d > 0.0).ok_or_else(|| tk.error())?;
        if !tk.keyword("m") {
            return Err(tk.error());
        }
        tk.keyword("distance");
        Action::Follow { distance }
    } else if tk.keyword("stop") {
        Action::Stop
    } else {
        return Err(tk.error());
    };
    tk.finish()?;
    Ok(SpatialCommand { action, raw: text.to_string() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn follow_phrase() {
        let c = parse_command("follow at 0.5 m distance", 0.0).unwrap();
        assert_eq!(c.action, Action::Follow { distance: 0.5 });
        assert_eq!(c.kind(), "FOLLOW");
        assert_eq!(parse_command("FOLLOW 2 M", 0.0).unwrap().action, Action::Follow { distance: 2.0 });
    }

    #[test]
    fn goto_uses_current_height() {
        let c = parse_command("goto 1.0 2.0", 0.08).unwrap();
        assert_eq!(c.action, Action::Goto { target: Vector3::new(1.0, 2.0, 0.08) });
        let c = parse_command("  GoTo -1 2.5 0.3 ", 0.08).unwrap();
        assert_eq!(c.action, Action::Goto { target: Vector3::new(-1.0, 2.5, 0.3) });
    }

    #[test]
    fn stop() {
        assert_eq!(parse_command("Stop", 0.0).unwrap().action, Action::Stop);
    }

    #[test]
    fn out_of_grammar_reports_first_bad_token() {
        let e = parse_command("jump over the wall", 0.0).unwrap_err();
        assert_eq!(e, UnrecognizedCommand { position: 0, token: "jump".into() });
        let e = parse_command("goto 1 north", 0.0).unwrap_err();
        assert_eq!((e.position, e.token.as_str()), (7, "north"));
        let e = parse_command("follow at -1 m", 0.0).unwrap_err();
        assert_eq!(e.token, "-1");
        let e = parse_command("follow at 1", 0.0).unwrap_err();
        assert_eq!((e.position, e.token.as_str()), (11, ""));
        let e = parse_command("stop now", 0.0).unwrap_err();
        assert_eq!(e.token, "now");
        assert_eq!(parse_command("", 0.0).unwrap_err().position, 0);
    }

    #[test]
    fn json_shape() {
        let c = parse_command("goto 1 2 3", 0.0).unwrap();
        let v = serde_json::to_value(c.to_json()).unwrap();
        assert_eq!(v["kind"], "GOTO");
        assert_eq!(v["target"], serde_json::json!([1.0, 2.0, 3.0]));
        assert!(v["follow_distance"].is_null());
    }

    fn action() -> impl Strategy<Value = Action> {
        let num = -1e3f64..1e3;
        prop_oneof![
            (num.clone(), num.clone(), num).prop_map(|(x, y, z)| Action::Goto { target: Vector3::new(x, y, z) }),
            (1e-3f64..100.0).prop_map(|distance| Action::Follow { distance }),
            Just(Action::Stop),
        ]
    }

    proptest! {
        #[test]
        fn format_then_parse_is_identity(a in action(), z in -5.0f64..5.0) {
            let cmd = SpatialCommand { action: a, raw: String::new() };
            let again = parse_command(&cmd.to_string(), z).unwrap();
            prop_assert_eq!(again.action, a);
        }
    }
}
