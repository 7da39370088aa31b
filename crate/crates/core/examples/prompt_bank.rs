//! Populate a category bank from a text model, curate it, then draw prompts.
//!
//!     cargo run --example prompt_bank

use recontext::backend::Backends;
use recontext::prompt_bank::{Decision, PromptBank};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let bank = PromptBank::open(dir.path())?;
    let backends = Backends::mock();

    let drafted = bank.populate("desk lamp", 6, backends.llm.as_ref(), 11)?;
    println!("drafted {} prompts, {} pending review", drafted.len(), bank.pending("desk lamp")?.len());

    // Nothing is drawable until a reviewer approves it.
    assert!(bank.get_prompts("desk lamp", 2, 0).is_err());
    for (i, entry) in drafted.iter().enumerate() {
        let decision = if i % 3 == 2 { Decision::Rejected } else { Decision::Approved };
        bank.curate(&entry.entry_id, decision, "dana")?;
    }

    // Re-populating with the same seed is a no-op.
    bank.populate("desk lamp", 6, backends.llm.as_ref(), 11)?;
    println!("entries after re-populate: {}", bank.entries("desk lamp")?.len());

    for prompt in bank.get_prompts("desk lamp", 3, 5)? {
        println!("  {prompt}");
    }
    println!("usage: {:?}", bank.usage("desk lamp")?);
    for line in bank.audit_log("desk lamp")? {
        println!("audit: {line:?}");
    }
    Ok(())
}
