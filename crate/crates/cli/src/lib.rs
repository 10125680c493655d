//! HTTP service and command-line front end for the sense-tracking engine.

pub mod commands;
pub mod interactive;
pub mod projection;
pub mod service;

use schemars::schema_for;
use serde_json::Value;

/// Published JSON schemas, by file name: request bodies and every response
/// body the service emits.
pub fn schemas() -> Vec<(&'static str, Value)> {
    let to_value = |s: schemars::Schema| s.to_value();
    vec![
        (
            "create_session.request.json",
            to_value(schema_for!(service::CreateSession)),
        ),
        (
            "post_utterance.request.json",
            to_value(schema_for!(service::PostUtterance)),
        ),
        (
            "session_handle.json",
            to_value(schema_for!(service::SessionHandle)),
        ),
        (
            "turn_response.json",
            to_value(schema_for!(service::TurnResponse)),
        ),
        (
            "state_response.json",
            to_value(schema_for!(service::StateResponse)),
        ),
        (
            "confidence_report.json",
            to_value(schema_for!(senseslam::ConfidenceReport)),
        ),
        ("error.json", to_value(schema_for!(service::ErrorBody))),
    ]
}
