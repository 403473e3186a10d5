//! Reference Darknet configurations (10-class detection heads).

pub const YOLOV3_TINY: &str = include_str!("../fixtures/yolov3-tiny.cfg");
pub const YOLOV3: &str = include_str!("../fixtures/yolov3.cfg");
/// YOLOv3 with one SPP block in front of the first detection head.
pub const YOLOV3_SPP: &str = include_str!("../fixtures/yolov3-spp.cfg");

pub const ALL: [&str; 3] = [YOLOV3_TINY, YOLOV3, YOLOV3_SPP];
