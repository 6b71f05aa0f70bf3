from __future__ import annotations

import sys

import numpy as np
from PyQt6.QtCore import Qt
from PyQt6.QtGui import QImage, QPixmap
from PyQt6.QtWidgets import (
    QApplication,
    QGridLayout,
    QGroupBox,
    QHBoxLayout,
    QLabel,
    QListWidget,
    QListWidgetItem,
    QMainWindow,
    QMessageBox,
    QSpinBox,
    QVBoxLayout,
    QWidget,
)

from .data import CLASS_NAMES, Dataset
from .errors import SsnetError
from .net import Encoder
from .palette import scene_panels
from .pipeline import decode, predict

PANEL_SCALE = 4
MAX_T = 100
DEFAULT_T = 30


def _to_pixmap(rgb: np.ndarray, scale: int = PANEL_SCALE) -> QPixmap:
    height, width, _ = rgb.shape
    data = np.ascontiguousarray(rgb, dtype=np.uint8)
    image = QImage(data.tobytes(), width, height, 3 * width, QImage.Format.Format_RGB888)
    return QPixmap.fromImage(image).scaled(
        width * scale,
        height * scale,
        Qt.AspectRatioMode.KeepAspectRatio,
        Qt.TransformationMode.FastTransformation,
    )


class SceneViewer(QMainWindow):
    def __init__(
        self,
        dataset: Dataset,
        encoder: Encoder | None = None,
        area_threshold: int = 64,
    ) -> None:
        super().__init__()
        self.dataset = dataset
        self.encoder = encoder
        self.area_threshold = area_threshold
        self._panel_labels: list[tuple[QLabel, QLabel]] = []

        self.setWindowTitle("ssnet scene viewer")
        self.setMinimumWidth(760)
        self._build_ui()
        if len(dataset):
            self.sample_list.setCurrentRow(0)

    def _build_ui(self) -> None:
        root = QWidget(self)
        root_layout = QHBoxLayout(root)

        samples_box = QGroupBox("Samples")
        samples_layout = QVBoxLayout(samples_box)
        self.sample_list = QListWidget()
        for index, sample in enumerate(self.dataset.samples):
            item = QListWidgetItem(f"{index:05d}  ({sample.instance_count} instances)")
            item.setData(Qt.ItemDataRole.UserRole, index)
            self.sample_list.addItem(item)
        self.sample_list.currentRowChanged.connect(self.show_sample)
        samples_layout.addWidget(self.sample_list)

        row = QHBoxLayout()
        row.addWidget(QLabel("Diffusion steps"))
        self.t_spin = QSpinBox()
        self.t_spin.setRange(0, MAX_T)
        self.t_spin.setValue(DEFAULT_T)
        self.t_spin.setEnabled(self.encoder is not None)
        self.t_spin.valueChanged.connect(lambda _: self.show_sample(self.sample_list.currentRow()))
        row.addWidget(self.t_spin)
        samples_layout.addLayout(row)
        root_layout.addWidget(samples_box)

        panels_box = QGroupBox("Maps")
        panels_layout = QGridLayout(panels_box)
        panel_count = 5 if self.encoder is not None else 3
        for index in range(panel_count):
            title = QLabel("")
            picture = QLabel()
            picture.setAlignment(Qt.AlignmentFlag.AlignCenter)
            panels_layout.addWidget(title, 2 * (index // 3), index % 3)
            panels_layout.addWidget(picture, 2 * (index // 3) + 1, index % 3)
            self._panel_labels.append((title, picture))

        legend = ", ".join(f"{i}={name}" for i, name in enumerate(CLASS_NAMES[: self.dataset.num_classes]))
        self.status_label = QLabel(f"Classes: {legend}")
        panels_layout.addWidget(self.status_label, 4, 0, 1, 3)
        root_layout.addWidget(panels_box, 1)

        self.setCentralWidget(root)

    def show_sample(self, row: int) -> None:
        if not 0 <= row < len(self.dataset):
            return
        sample = self.dataset[row]
        predicted_semantic = None
        predicted_instances = None
        if self.encoder is not None:
            try:
                prediction = predict(self.encoder, sample.image[None], self.t_spin.value(), training=False)
                decoded = decode(prediction, self.dataset.thing_classes, self.area_threshold)
            except SsnetError as exc:
                self._show_error(str(exc))
                return
            predicted_semantic = decoded.semantic[0]
            predicted_instances = decoded.instances.labels[0]
            self.status_label.setText(
                f"Sample {row}: {sample.instance_count} instances, {decoded.instances.count(0)} predicted"
            )

        panels = scene_panels(sample.image, sample.semantic, sample.instances, predicted_semantic, predicted_instances)
        for (title, picture), (name, rgb) in zip(self._panel_labels, panels):
            title.setText(name)
            picture.setPixmap(_to_pixmap(rgb))

    def _show_error(self, message: str) -> None:
        self.status_label.setText(message)
        QMessageBox.critical(self, "ssnet scene viewer", message)


def run_viewer(dataset: Dataset, encoder: Encoder | None = None, area_threshold: int = 64) -> int:
    app = QApplication(sys.argv[:1])
    app.setApplicationName("ssnet viewer")
    window = SceneViewer(dataset, encoder, area_threshold)
    window.show()
    return app.exec()
