use super::clients::VerifierAgent;
use super::types::{AnomalyCategory, Quadruplet, VerificationRecord};
use crate::error::{Error, Result};

/// Ask each agent once per category and attach the record. On any agent
/// error the quadruplet is left unverified.
pub fn verify_quadruplet(
    q: &mut Quadruplet,
    agent_a: &dyn VerifierAgent,
    agent_b: &dyn VerifierAgent,
) -> Result<VerificationRecord> {
    if q.verification.is_some() {
        return Err(Error::Config(format!("quadruplet {} is already verified", q.id)));
    }
    let ask = |agent: &dyn VerifierAgent, name: &str| -> Result<[bool; 4]> {
        let mut out = [false; 4];
        for c in AnomalyCategory::ALL {
            out[c.index()] = agent.check(q, c).map_err(|e| match e {
                Error::Client { message, .. } => Error::client(format!("verify/{name}"), message),
                other => Error::client(format!("verify/{name}"), other.to_string()),
            })?;
        }
        Ok(out)
    };
    let a = ask(agent_a, "agent_a")?;
    let b = ask(agent_b, "agent_b")?;
    let record = VerificationRecord::new(a, b);
    q.verification = Some(record);
    Ok(record)
}
