//! A small random-weight convolutional graph that satisfies the backbone
//! contract.
//!
//! Used by the test suites, the guide and the bundled smoke run so that the
//! full pipeline can execute without a converted pretrained checkpoint. The
//! features are random projections, not ImageNet features.
//!
//! Layout (opset 13):
//!
//! ```text
//! image f32[N,224,224,3] -> Transpose(NCHW) -> (x - mean) / std
//!   -> Conv 4x4/4 (32)  -> Relu    56x56
//!   -> Conv 2x2/2 (128) -> Relu    28x28
//!   -> Conv 2x2/2 (256) -> Relu    14x14
//!   -> Conv 2x2/2 (1280) -> Relu    7x7  -> Transpose(NHWC) -> feature_maps
//!                                        -> GlobalAveragePool -> Flatten -> pooled
//! ```

use std::path::Path;

use prost::Message;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tract_onnx::pb;

use crate::backbone::FEATURE_DIM;
use crate::error::{Error, Result};

const OPSET: i64 = 13;
const IR_VERSION: i64 = 7;

fn int_attr(name: &str, v: i64) -> pb::AttributeProto {
    pb::AttributeProto {
        name: name.into(),
        r#type: pb::attribute_proto::AttributeType::Int as i32,
        i: v,
        ..Default::default()
    }
}

fn ints_attr(name: &str, v: &[i64]) -> pb::AttributeProto {
    pb::AttributeProto {
        name: name.into(),
        r#type: pb::attribute_proto::AttributeType::Ints as i32,
        ints: v.to_vec(),
        ..Default::default()
    }
}

fn node(op: &str, inputs: &[&str], output: &str, attrs: Vec<pb::AttributeProto>) -> pb::NodeProto {
    pb::NodeProto {
        op_type: op.into(),
        name: format!("{op}_{output}"),
        input: inputs.iter().map(|s| s.to_string()).collect(),
        output: vec![output.into()],
        attribute: attrs,
        ..Default::default()
    }
}

fn tensor(name: &str, dims: &[i64], values: Vec<f32>) -> pb::TensorProto {
    pb::TensorProto {
        name: name.into(),
        dims: dims.to_vec(),
        data_type: pb::tensor_proto::DataType::Float as i32,
        raw_data: values.iter().flat_map(|v| v.to_le_bytes()).collect(),
        ..Default::default()
    }
}

fn value_info(name: &str, dims: &[Option<i64>]) -> pb::ValueInfoProto {
    use pb::tensor_shape_proto::{dimension::Value, Dimension};
    pb::ValueInfoProto {
        name: name.into(),
        r#type: Some(pb::TypeProto {
            value: Some(pb::type_proto::Value::TensorType(pb::type_proto::Tensor {
                elem_type: pb::tensor_proto::DataType::Float as i32,
                shape: Some(pb::TensorShapeProto {
                    dim: dims
                        .iter()
                        .map(|d| Dimension {
                            value: Some(match d {
                                Some(v) => Value::DimValue(*v),
                                None => Value::DimParam("N".into()),
                            }),
                            ..Default::default()
                        })
                        .collect(),
                }),
            })),
            ..Default::default()
        }),
        ..Default::default()
    }
}

/// Options for [`build`]. `pooled_width` and `negative_maps` exist to build
/// deliberately broken graphs for load-time validation tests.
#[derive(Debug, Clone)]
pub struct ReferenceOptions {
    pub seed: u64,
    pub pooled_width: usize,
    /// Tap the maps before the last Relu.
    pub negative_maps: bool,
}

impl Default for ReferenceOptions {
    fn default() -> Self {
        ReferenceOptions {
            seed: 0x4d43_4546,
            pooled_width: FEATURE_DIM,
            negative_maps: false,
        }
    }
}

/// Serialized ONNX model bytes.
pub fn build(opts: &ReferenceOptions) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut init = Vec::new();
    let mut nodes = Vec::new();

    nodes.push(node(
        "Transpose",
        &["image"],
        "nchw",
        vec![ints_attr("perm", &[0, 3, 1, 2])],
    ));
    init.push(tensor("mean", &[1, 3, 1, 1], vec![123.675, 116.28, 103.53]));
    init.push(tensor("std", &[1, 3, 1, 1], vec![58.395, 57.12, 57.375]));
    nodes.push(node("Sub", &["nchw", "mean"], "centered", vec![]));
    nodes.push(node("Div", &["centered", "std"], "normalized", vec![]));
    let mut x = "normalized".to_string();

    let widths = [3usize, 32, 128, 256, opts.pooled_width];
    let kernels = [4i64, 2, 2, 2];
    for layer in 0..4 {
        let (cin, cout, k) = (widths[layer], widths[layer + 1], kernels[layer]);
        let fan_in = cin * (k * k) as usize;
        let bound = (6.0 / fan_in as f64).sqrt() as f32;
        let w: Vec<f32> = (0..cout * fan_in).map(|_| rng.gen_range(-bound..bound)).collect();
        let b: Vec<f32> = (0..cout).map(|_| rng.gen_range(0.0..0.05)).collect();
        let (wn, bn) = (format!("w{layer}"), format!("b{layer}"));
        init.push(tensor(&wn, &[cout as i64, cin as i64, k, k], w));
        init.push(tensor(&bn, &[cout as i64], b));
        let conv = format!("conv{layer}");
        nodes.push(node(
            "Conv",
            &[&x, &wn, &bn],
            &conv,
            vec![ints_attr("kernel_shape", &[k, k]), ints_attr("strides", &[k, k])],
        ));
        let act = format!("act{layer}");
        nodes.push(node("Relu", &[&conv], &act, vec![]));
        x = if layer == 3 && opts.negative_maps { conv } else { act };
    }
    nodes.push(node(
        "Transpose",
        &[&x],
        "feature_maps",
        vec![ints_attr("perm", &[0, 2, 3, 1])],
    ));
    nodes.push(node("GlobalAveragePool", &[&x], "gap", vec![]));
    nodes.push(node("Flatten", &["gap"], "pooled", vec![int_attr("axis", 1)]));

    let width = opts.pooled_width as i64;
    let graph = pb::GraphProto {
        name: "reference_backbone".into(),
        node: nodes,
        initializer: init,
        input: vec![value_info("image", &[None, Some(224), Some(224), Some(3)])],
        output: vec![
            value_info("feature_maps", &[None, Some(7), Some(7), Some(width)]),
            value_info("pooled", &[None, Some(width)]),
        ],
        ..Default::default()
    };
    let model = pb::ModelProto {
        ir_version: IR_VERSION,
        opset_import: vec![pb::OperatorSetIdProto {
            domain: String::new(),
            version: OPSET,
        }],
        producer_name: "mcfuse-reference".into(),
        graph: Some(graph),
        ..Default::default()
    };
    model.encode_to_vec()
}

/// Writes the default reference graph for `seed` to `path`.
pub fn write(path: impl AsRef<Path>, seed: u64) -> Result<()> {
    let path = path.as_ref();
    let bytes = build(&ReferenceOptions {
        seed,
        ..Default::default()
    });
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
