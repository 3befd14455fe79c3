//! Canonical ARKit blendshape channel list and the channel groups derived
//! from it.

/// Version tag of [`CHANNELS`]; bump when the list or groups change.
pub const CHANNEL_LIST_VERSION: u32 = 1;

pub const NUM_CHANNELS: usize = 52;

/// ARKit blendshape names in capture-export order.
pub const CHANNELS: [&str; NUM_CHANNELS] = [
    "eyeBlinkLeft",
    "eyeLookDownLeft",
    "eyeLookInLeft",
    "eyeLookOutLeft",
    "eyeLookUpLeft",
    "eyeSquintLeft",
    "eyeWideLeft",
    "eyeBlinkRight",
    "eyeLookDownRight",
    "eyeLookInRight",
    "eyeLookOutRight",
    "eyeLookUpRight",
    "eyeSquintRight",
    "eyeWideRight",
    "jawForward",
    "jawRight",
    "jawLeft",
    "jawOpen",
    "mouthClose",
    "mouthFunnel",
    "mouthPucker",
    "mouthRight",
    "mouthLeft",
    "mouthSmileLeft",
    "mouthSmileRight",
    "mouthFrownLeft",
    "mouthFrownRight",
    "mouthDimpleLeft",
    "mouthDimpleRight",
    "mouthStretchLeft",
    "mouthStretchRight",
    "mouthRollLower",
    "mouthRollUpper",
    "mouthShrugLower",
    "mouthShrugUpper",
    "mouthPressLeft",
    "mouthPressRight",
    "mouthLowerDownLeft",
    "mouthLowerDownRight",
    "mouthUpperUpLeft",
    "mouthUpperUpRight",
    "browDownLeft",
    "browDownRight",
    "browInnerUp",
    "browOuterUpLeft",
    "browOuterUpRight",
    "cheekPuff",
    "cheekSquintLeft",
    "cheekSquintRight",
    "noseSneerLeft",
    "noseSneerRight",
    "tongueOut",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ChannelGroup {
    Lip,
    Brow,
    Eye,
    Jaw,
    Other,
}

pub fn index_of(name: &str) -> Option<usize> {
    CHANNELS.iter().position(|c| *c == name)
}

pub fn is_lip(name: &str) -> bool {
    name.starts_with("mouth") || name.starts_with("jaw") || name == "tongueOut"
}

pub fn is_upper_face(name: &str) -> bool {
    name.starts_with("brow") || name.starts_with("eye") || name.starts_with("cheekSquint")
}

pub fn group_of(name: &str) -> ChannelGroup {
    if name.starts_with("jaw") {
        ChannelGroup::Jaw
    } else if is_lip(name) {
        ChannelGroup::Lip
    } else if name.starts_with("brow") {
        ChannelGroup::Brow
    } else if name.starts_with("eye") {
        ChannelGroup::Eye
    } else {
        ChannelGroup::Other
    }
}

/// Mouth, jaw, and tongue channels (28).
pub fn lip_indices() -> Vec<usize> {
    (0..NUM_CHANNELS).filter(|&i| is_lip(CHANNELS[i])).collect()
}

/// Brow, eye (blinks included), and cheek-squint channels (21).
pub fn upper_face_indices() -> Vec<usize> {
    (0..NUM_CHANNELS).filter(|&i| is_upper_face(CHANNELS[i])).collect()
}

pub fn brow_indices() -> Vec<usize> {
    (0..NUM_CHANNELS)
        .filter(|&i| CHANNELS[i].starts_with("brow"))
        .collect()
}

pub fn group_indices(group: ChannelGroup) -> Vec<usize> {
    (0..NUM_CHANNELS)
        .filter(|&i| group_of(CHANNELS[i]) == group)
        .collect()
}
