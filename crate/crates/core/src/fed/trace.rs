//! Record of every simulated client/server message.
//!
//! Messages carry only what would cross the network: parameter counts,
//! sample counts and scalar noise levels. Tests audit the trace to check
//! that no per-sample information leaves a client.

use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Message {
    BroadcastNothing,
    BroadcastParameters { num_parameters: usize },
    UploadNoiseLevel { client_id: usize, n_hat: f64 },
    UploadUpdate {
        client_id: usize,
        sample_count: usize,
        num_parameters: usize,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Trace {
    messages: Vec<Message>,
}

impl Trace {
    pub fn push(&mut self, message: Message) {
        self.messages.push(message);
    }

    pub fn extend(&mut self, other: Trace) {
        self.messages.extend(other.messages);
    }

    pub fn messages(&self) -> &[Message] {
        &self.messages
    }

    /// True when every upload is a scalar noise level.
    pub fn only_scalar_uploads(&self) -> bool {
        self.messages.iter().all(|m| {
            matches!(
                m,
                Message::BroadcastNothing
                    | Message::BroadcastParameters { .. }
                    | Message::UploadNoiseLevel { .. }
            )
        })
    }
}
