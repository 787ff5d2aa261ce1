//! `quire ingest`: OCR page lines in, one normalized document file out.

use crate::CliError;
use quire_core::ocr;
use std::fs::File;
use std::io::BufReader;
use std::path::Path;

pub fn run(input: &Path, output: &Path) -> Result<(), CliError> {
    let file = File::open(input)
        .map_err(|e| CliError::runtime(format!("cannot open {}: {e}", input.display())))?;
    let doc = ocr::ingest(BufReader::new(file)).map_err(CliError::from_ocr)?;
    let mut json = doc.to_json();
    json.push('\n');
    std::fs::write(output, json)
        .map_err(|e| CliError::runtime(format!("cannot write {}: {e}", output.display())))?;
    println!(
        "ingested {} tokens across {} pages -> {}",
        doc.len(),
        doc.pages.len(),
        output.display()
    );
    Ok(())
}
