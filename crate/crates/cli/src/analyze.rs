use serde::Serialize;
use spap_core::arch::{ArchSpec, ParamReport, RfReport};

use crate::args::AnalyzeArgs;
use crate::error::CliError;
use crate::load;

#[derive(Serialize)]
struct LayerShape<'a> {
    label: &'a str,
    kind: &'static str,
    shape: [usize; 3],
}

/// Stable keys of `analyze --json`.
#[derive(Serialize)]
struct Report<'a> {
    name: &'a str,
    input: [usize; 3],
    output_shape: [usize; 3],
    #[serde(skip_serializing_if = "Option::is_none")]
    shapes: Option<Vec<LayerShape<'a>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    params: Option<ParamReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    receptive_field: Option<RfReport>,
}

fn layer_shapes(spec: &ArchSpec) -> Result<Vec<LayerShape<'_>>, CliError> {
    let shapes = spec.shapes()?;
    Ok(spec.layers.iter().zip(shapes).map(|(l, shape)| LayerShape { label: &l.label, kind: l.op.kind(), shape }).collect())
}

fn dims(s: [usize; 3]) -> String {
    format!("{}x{}x{}", s[0], s[1], s[2])
}

pub fn run(a: AnalyzeArgs) -> Result<(), CliError> {
    let spec = load::arch(&a.arch)?;
    eprintln!("# analyze {} ({})", a.arch, spec.name);
    let everything = !(a.rf || a.params || a.shapes);
    let want_shapes = a.shapes || everything;
    let want_params = a.params || everything;
    let want_rf = a.rf || (everything && spec.receptive_field().is_ok());

    let report = Report {
        name: &spec.name,
        input: spec.input,
        output_shape: spec.output_shape()?,
        shapes: want_shapes.then(|| layer_shapes(&spec)).transpose()?,
        params: want_params.then(|| spec.param_count()).transpose()?,
        receptive_field: want_rf.then(|| spec.receptive_field()).transpose()?,
    };

    if a.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
        return Ok(());
    }
    println!("name {}", report.name);
    println!("input {}  output {}", dims(report.input), dims(report.output_shape));
    if let Some(shapes) = &report.shapes {
        println!("\n{:<14} {:<12} {:>14}", "layer", "kind", "shape");
        for l in shapes {
            println!("{:<14} {:<12} {:>14}", l.label, l.kind, dims(l.shape));
        }
    }
    if let Some(p) = &report.params {
        println!("\n{:<14} {:<12} {:>12}", "layer", "kind", "params");
        for l in &p.layers {
            println!("{:<14} {:<12} {:>12}", l.label, l.kind, l.count);
        }
        println!("total params {}", p.total);
    }
    if let Some(rf) = &report.receptive_field {
        println!("\n{:<14} {:<12} {:>6} {:>6}", "layer", "kind", "rf", "jump");
        for r in &rf.rows {
            println!("{:<14} {:<12} {:>6} {:>6}", r.label, r.kind, r.receptive_field, r.jump);
        }
        if let Some(stop) = &rf.stopped_at {
            println!("stopped at linear layer {stop}");
        }
        println!("final receptive field {}", rf.final_rf);
    }
    Ok(())
}
