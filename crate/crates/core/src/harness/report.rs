//! Summary tables: per-model aggregates and the trade-off curve.

use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::metrics::{tradeoff_curve, tradeoff_table, PrivacyReport};

use super::run::{atomic_write, ExperimentContext, StageStatus};

/// Render the per-model aggregate table and the trade-off table from the
/// privacy report plus the per-model training summaries. Missing values are
/// explicit `-` markers, never silently dropped rows.
pub fn stage_report(ctx: &mut ExperimentContext, metrics_hash: &str) -> Result<String> {
    let stage = "report".to_string();
    let hash = metrics_hash.to_string();
    let report_dir = ctx.out_dir.join("report");
    let summary_path = report_dir.join("summary.tsv");
    let tradeoff_path = report_dir.join("tradeoff.tsv");

    let result = (|| -> Result<Vec<PathBuf>> {
        let privacy_path = report_dir.join("privacy_report.json");
        let privacy: PrivacyReport = if privacy_path.exists() {
            serde_json::from_str(
                &std::fs::read_to_string(&privacy_path).map_err(|e| Error::io(&privacy_path, e))?,
            )?
        } else {
            PrivacyReport::default()
        };
        if privacy.aggregates.is_empty() && ctx.spec.models.is_empty() {
            return Err(Error::Empty("nothing to report".into()));
        }

        let mut out = String::from(
            "model\tregime\tepochs\ttrain_acc\tval_acc\tattack\tavg_max_similarity\tavg_privacy_loss_l2\tadversarial_radius_l2\n",
        );
        let mut seen_model_rows = 0;
        let mut model_ids: Vec<String> = privacy
            .aggregates
            .iter()
            .map(|a| a.model_id.clone())
            .collect();
        for m in &ctx.spec.models {
            if !model_ids.contains(&m.id) {
                model_ids.push(m.id.clone());
            }
        }
        model_ids.sort();
        model_ids.dedup();

        for model_id in &model_ids {
            let summary = read_training_summary(ctx, model_id);
            let (regime, epochs, train_acc, val_acc) = summary.unwrap_or_else(|| {
                ("-".into(), "-".into(), "-".into(), "-".into())
            });
            let rows: Vec<_> = privacy
                .aggregates
                .iter()
                .filter(|a| &a.model_id == model_id)
                .collect();
            if rows.is_empty() {
                out.push_str(&format!(
                    "{model_id}\t{regime}\t{epochs}\t{train_acc}\t{val_acc}\t-\t-\t-\t-\n"
                ));
                seen_model_rows += 1;
                continue;
            }
            for a in rows {
                let attack = if a.attack_id.is_empty() { "-" } else { &a.attack_id };
                let sim = fmt_opt(a.avg_max_similarity);
                let l2 = fmt_opt(a.avg_privacy_loss_l2);
                let radius = a
                    .adversarial_radius
                    .map(|r| format!("{r:.4}"))
                    .unwrap_or_else(|| "-".into());
                out.push_str(&format!(
                    "{model_id}\t{regime}\t{epochs}\t{train_acc}\t{val_acc}\t{attack}\t{sim}\t{l2}\t{radius}\n"
                ));
                seen_model_rows += 1;
            }
        }
        if seen_model_rows == 0 {
            return Err(Error::Empty("report found no models".into()));
        }
        atomic_write(&summary_path, out.as_bytes())?;

        // trade-off over the first attack id shared by >= 2 models
        let mut outputs = vec![summary_path.clone()];
        let mut attack_ids: Vec<String> = privacy
            .aggregates
            .iter()
            .filter(|a| !a.attack_id.is_empty())
            .map(|a| a.attack_id.clone())
            .collect();
        attack_ids.sort();
        attack_ids.dedup();
        for attack_id in &attack_ids {
            let points: Vec<_> = privacy
                .aggregates
                .iter()
                .filter(|a| &a.attack_id == attack_id && a.adversarial_radius.is_some())
                .cloned()
                .collect();
            if points.len() >= 2 {
                let curve = tradeoff_curve(&points)?;
                atomic_write(&tradeoff_path, tradeoff_table(&curve).as_bytes())?;
                outputs.push(tradeoff_path.clone());
                break;
            }
        }
        Ok(outputs)
    })();

    match result {
        Ok(outputs) => {
            ctx.record_public(&stage, &hash, outputs, StageStatus::Ok)?;
            Ok(hash)
        }
        Err(e) => {
            ctx.record_public(&stage, &hash, Vec::new(), StageStatus::Failed)?;
            Err(Error::Stage {
                stage,
                reason: e.to_string(),
            })
        }
    }
}

fn fmt_opt(v: f32) -> String {
    if v.is_nan() {
        "-".into()
    } else {
        format!("{v:.4}")
    }
}

fn read_training_summary(
    ctx: &ExperimentContext,
    model_id: &str,
) -> Option<(String, String, String, String)> {
    // early checkpoints inherit the base model's training summary
    let base = model_id.split("-e").next().unwrap_or(model_id);
    let path = ctx.out_dir.join("models").join(format!("{base}.summary.json"));
    let text = std::fs::read_to_string(path).ok()?;
    let v: serde_json::Value = serde_json::from_str(&text).ok()?;
    let fmt_acc = |key: &str| {
        v.get(key)
            .and_then(|x| x.as_f64())
            .map(|x| format!("{x:.4}"))
            .unwrap_or_else(|| "-".into())
    };
    Some((
        v.get("regime")
            .and_then(|x| x.as_str())
            .unwrap_or("-")
            .to_string(),
        v.get("epochs")
            .and_then(|x| x.as_u64())
            .map(|x| x.to_string())
            .unwrap_or_else(|| "-".into()),
        fmt_acc("train_acc"),
        fmt_acc("val_acc"),
    ))
}
