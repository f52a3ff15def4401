"""Published per-task probe accuracies (percent) for the teacher and three students."""

TASKS = ("voxceleb1", "voxforge", "speech_commands", "crema_d", "savee", "masked_speech", "esc50_hs")

TEACHER = dict(zip(TASKS, (48.5, 84.5, 81.9, 66.2, 70.0, 66.0, 86.4)))

STUDENTS = {
    "small_2.0_gap": dict(zip(TASKS, (44.5, 76.9, 79.7, 70.9, 67.5, 65.7, 86.4))),
    "small_0.5_qat": dict(zip(TASKS, (37.0, 75.3, 76.6, 67.0, 67.5, 63.4, 77.3))),
    "tiny_0.5_comp_gap": dict(zip(TASKS, (29.2, 68.0, 57.8, 60.8, 59.2, 61.6, 78.8))),
}

# published on-device latency (ms) and size (MB) for the same three students
LATENCY_MS = {"small_2.0_gap": 8.5, "small_0.5_qat": 3.0, "tiny_0.5_comp_gap": 0.9}
SIZE_MB = {"small_2.0_gap": 38.5, "small_0.5_qat": 12.7, "tiny_0.5_comp_gap": 2.3}
