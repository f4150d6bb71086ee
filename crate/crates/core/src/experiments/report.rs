//! Methods × datasets summary built from the ledger.

use std::collections::BTreeMap;

use crate::experiments::lab::{LedgerEntry, ReportRow};

/// Latest row per (method, domain, seed), sorted by method tag.
pub fn collect_rows(ledger: &[LedgerEntry]) -> Vec<ReportRow> {
    let mut latest: BTreeMap<(String, &'static str, u64), ReportRow> = BTreeMap::new();
    for e in ledger {
        for r in &e.rows {
            latest.insert((r.method.as_str().to_string(), r.domain.as_str(), r.seed), r.clone());
        }
    }
    latest.into_values().collect()
}

/// CSV without wall-clock columns, so equal runs give equal bytes.
pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut s = String::from("method,domain,seed,ap,ap50,ap_mask,unfrozen,total\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.6},{},{}\n",
            r.method,
            r.domain.as_str(),
            r.seed,
            r.ap,
            r.ap50,
            r.ap_mask,
            r.unfrozen,
            r.total
        ));
    }
    s
}

pub fn report_markdown(rows: &[ReportRow]) -> String {
    let mut s = String::from("# Results\n\n");
    s.push_str("AP averages IoU 0.50:0.95; AP50 uses IoU 0.5. Parameter columns count scalars ");
    s.push_str("handed to the optimizer against the whole model. Embedding plots use a ");
    s.push_str("deterministic PCA projection rather than t-SNE.\n\n");
    s.push_str("| method | domain | seed | AP | AP50 | AP mask | unfrozen / total | s / step |\n");
    s.push_str("|---|---|---|---|---|---|---|---|\n");
    for r in rows {
        s.push_str(&format!(
            "| {} | {} | {} | {:.4} | {:.4} | {:.4} | {} / {} | {:.4} |\n",
            r.method,
            r.domain.as_str(),
            r.seed,
            r.ap,
            r.ap50,
            r.ap_mask,
            r.unfrozen,
            r.total,
            r.seconds_per_step
        ));
    }
    s
}
