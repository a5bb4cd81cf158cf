//! CSV emission: one file per metric family, fixed column schema
//! `layer,head,source,target,value,n` (surplus adds `total_attention`).

use std::fs;
use std::path::Path;

use crate::Result;

use super::pipeline::AnalysisReport;

pub const ALL_CSV_FILES: [&str; 5] = [
    "cls_attention.csv",
    "cross_modal_flow.csv",
    "surplus_attention.csv",
    "grounding_accuracy.csv",
    "drop_ve.csv",
];

pub fn write_csv_files(dir: &Path, report: &AnalysisReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    let simple = |rows: &[super::pipeline::MetricRow]| {
        let mut s = String::from("layer,head,source,target,value,n\n");
        for r in rows {
            s.push_str(&format!(
                "{},{},{},{},{:.12},{}\n",
                r.layer, r.head, r.source, r.target, r.value, r.n
            ));
        }
        s
    };
    fs::write(dir.join("cls_attention.csv"), simple(&report.cls))?;
    fs::write(dir.join("cross_modal_flow.csv"), simple(&report.flow))?;
    fs::write(dir.join("grounding_accuracy.csv"), simple(&report.grounding))?;
    fs::write(dir.join("drop_ve.csv"), simple(&report.drop))?;

    let mut s = String::from("layer,head,source,target,value,total_attention,n\n");
    for r in &report.surplus {
        s.push_str(&format!(
            "{},{},{},{},{:.12},{:.12},{}\n",
            r.layer, r.head, r.source, r.target, r.value, r.total_attention, r.n
        ));
    }
    fs::write(dir.join("surplus_attention.csv"), s)?;
    Ok(())
}
