//! Input loading, hashing and report output.

use std::fs;
use std::io::Write;
use std::path::Path;

use minvar::claims::ClaimFile;
use minvar::market::MarketFile;
use minvar::{Claim, Market};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::{CliError, Common};

pub struct Inputs {
    pub market: Market,
    pub claim: Claim,
    pub market_hash: String,
    pub claim_hash: String,
}

fn read(path: &Path, what: &str) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read {what} file {}: {e}", path.display())))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Parses both files; any problem with them is a usage error.
pub fn load(common: &Common) -> Result<Inputs, CliError> {
    if common.steps == Some(0) {
        return Err(CliError::Usage("--steps must be at least 1".into()));
    }
    let market_text = read(&common.market, "market")?;
    let claim_text = read(&common.claim, "claim")?;
    let market = MarketFile::from_json(&market_text)
        .and_then(|f| f.to_coefficients::<f64>(common.steps))
        .map_err(|e| CliError::Usage(format!("{}: {e}", common.market.display())))?;
    let claim = ClaimFile::from_json(&claim_text)
        .and_then(|f| f.to_claim(&market))
        .map_err(|e| CliError::Usage(format!("{}: {e}", common.claim.display())))?;
    Ok(Inputs {
        market,
        claim,
        market_hash: sha256_hex(market_text.as_bytes()),
        claim_hash: sha256_hex(claim_text.as_bytes()),
    })
}

#[derive(Debug, Serialize)]
pub struct Meta {
    pub version: &'static str,
    pub command: &'static str,
    pub seed: u64,
    pub config_hash: String,
    pub market_hash: String,
    pub claim_hash: String,
}

/// Hash over the command, its arguments and both file contents.
pub fn meta<A: Serialize>(command: &'static str, args: &A, seed: u64, inputs: &Inputs) -> Meta {
    let canonical = serde_json::json!({
        "command": command,
        "args": args,
        "market": inputs.market_hash,
        "claim": inputs.claim_hash,
    });
    Meta {
        version: env!("CARGO_PKG_VERSION"),
        command,
        seed,
        config_hash: sha256_hex(canonical.to_string().as_bytes()),
        market_hash: inputs.market_hash.clone(),
        claim_hash: inputs.claim_hash.clone(),
    }
}

pub fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<(), CliError> {
    match out {
        Some(path) => fs::write(path, bytes).map_err(|e| CliError::Usage(format!("cannot write {}: {e}", path.display()))),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(bytes).and_then(|_| stdout.flush()).map_err(|e| CliError::Failed(format!("stdout: {e}")))
        }
    }
}

pub fn emit_json<R: Serialize>(out: Option<&Path>, report: &R) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(report).expect("report serializes");
    text.push('\n');
    emit(out, text.as_bytes())
}
