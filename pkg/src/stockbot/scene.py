"""Supply-room scene model: shelves, bins, cart, items, and the noise
configuration for every stochastic injector in the simulator.

Scenes serialize to a JSON document with top-level keys ``scene``,
``robot`` and ``noise`` (see ``scene_to_dict`` for the schema); every log
the stack emits records the seed used.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .geometry import Box, Transform, rot_y, rot_z

SCENE_SCHEMA_VERSION = 1


class SceneError(Exception):
    pass


@dataclass
class NoiseConfig:
    """Seeded noise magnitudes; all probabilities in [0, 1].

    localization_sigma is meters of believed-pose drift per sqrt(meter)
    traveled; marker_pose_sigma is (meters, radians) on fiducial reads.
    """

    localization_sigma: float = 0.05
    localization_sigma_yaw: float = 0.015
    localization_cap: float = 0.15
    depth_sigma: float = 0.0
    marker_pose_sigma: tuple = (0.003, 0.005)
    marker_miss_prob: float = 0.10
    marker_misid_prob: float = 0.02
    detector_miss_prob: float = 0.10
    merged_mask_prob: float = 0.05
    suction_fail_prob_deformable: float = 0.30
    voxel_drop_frac: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in (
            "marker_miss_prob",
            "marker_misid_prob",
            "detector_miss_prob",
            "merged_mask_prob",
            "suction_fail_prob_deformable",
            "voxel_drop_frac",
        ):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise SceneError(f"{name}={p} outside [0, 1]")
        self.marker_pose_sigma = tuple(float(v) for v in self.marker_pose_sigma)

    @staticmethod
    def zero(seed: int = 0) -> "NoiseConfig":
        return NoiseConfig(
            localization_sigma=0.0,
            localization_sigma_yaw=0.0,
            depth_sigma=0.0,
            marker_pose_sigma=(0.0, 0.0),
            marker_miss_prob=0.0,
            marker_misid_prob=0.0,
            detector_miss_prob=0.0,
            merged_mask_prob=0.0,
            suction_fail_prob_deformable=0.0,
            voxel_drop_frac=0.0,
            seed=seed,
        )


@dataclass
class Item:
    sku: str
    box_extents: tuple          # full extents, meters
    pose: Transform
    deformable: bool = False

    def box(self) -> Box:
        return Box(np.asarray(self.box_extents) / 2.0, self.pose)


@dataclass
class Bin:
    fiducial_id: int
    pose: Transform             # center of the bin floor, +z up, +x outward
    accepts_sku: str
    inner: tuple = (0.30, 0.24)  # interior footprint (x depth, y width)
    depth: float = 0.13
    wall: float = 0.01

    def opening_height(self) -> float:
        return float(self.pose.t[2] + self.depth)

    def boxes(self) -> list:
        """Bin as five thin boxes: floor plus four walls."""
        ix, iy = self.inner
        d, w = self.depth, self.wall
        parts = []
        parts.append(Box([ix / 2 + w, iy / 2 + w, w / 2],
                         self.pose @ Transform.from_xyz_yaw(0, 0, -w / 2)))
        for sx in (-1, 1):
            parts.append(Box([w / 2, iy / 2 + w, d / 2],
                             self.pose @ Transform.from_xyz_yaw(sx * (ix / 2 + w / 2), 0, d / 2)))
        for sy in (-1, 1):
            parts.append(Box([ix / 2, w / 2, d / 2],
                             self.pose @ Transform.from_xyz_yaw(0, sy * (iy / 2 + w / 2), d / 2)))
        return parts

    def marker_pose(self) -> Transform:
        """Fiducial on the front lip, facing outward (+x of the bin frame)."""
        lip = self.pose @ Transform.from_xyz_yaw(self.inner[0] / 2 + self.wall, 0, self.depth / 2)
        return lip


@dataclass
class Shelf:
    pose: Transform             # frame at floor level, +x out of the shelf face
    width: float = 2.2          # y extent
    board_depth: float = 0.45   # x extent
    board_heights: tuple = (0.40, 0.70, 1.00)
    board_thickness: float = 0.03
    side_thickness: float = 0.03
    height: float = 1.5
    bins: list = field(default_factory=list)

    def boxes(self) -> list:
        parts = []
        for h in self.board_heights:
            parts.append(
                Box(
                    [self.board_depth / 2, self.width / 2, self.board_thickness / 2],
                    self.pose @ Transform.from_xyz_yaw(-self.board_depth / 2, 0, h - self.board_thickness / 2),
                )
            )
        for sy in (-1, 1):
            parts.append(
                Box(
                    [self.board_depth / 2, self.side_thickness / 2, self.height / 2],
                    self.pose
                    @ Transform.from_xyz_yaw(
                        -self.board_depth / 2, sy * (self.width + self.side_thickness) / 2, self.height / 2
                    ),
                )
            )
        # Back panel.
        parts.append(
            Box(
                [self.side_thickness / 2, self.width / 2, self.height / 2],
                self.pose @ Transform.from_xyz_yaw(-self.board_depth - self.side_thickness / 2, 0, self.height / 2),
            )
        )
        return parts


@dataclass
class Cart:
    pose: Transform             # frame at floor level, center of the cart
    top_extents: tuple = (0.8, 0.6)
    top_height: float = 0.75
    items: list = field(default_factory=list)   # skus initially on the cart

    def boxes(self) -> list:
        ex, ey = self.top_extents
        return [Box([ex / 2, ey / 2, self.top_height / 2],
                    self.pose @ Transform.from_xyz_yaw(0, 0, self.top_height / 2))]


@dataclass
class Scene:
    shelves: list
    cart: Cart
    items: list                       # list[Item]
    static_meshes: list               # list[Box], walls and fixtures
    requester_pose: Transform = field(default_factory=Transform.identity)
    requester_surface_height: float = 0.8
    bounds: tuple = ((0.0, 0.0), (6.0, 5.0))

    def __post_init__(self):
        ids = [b.fiducial_id for b in self.bins()]
        if len(ids) != len(set(ids)):
            raise SceneError("fiducial ids must be unique per scene")
        sku_bins = {}
        for b in self.bins():
            if b.accepts_sku in sku_bins:
                raise SceneError(f"sku {b.accepts_sku!r} accepted by more than one bin")
            sku_bins[b.accepts_sku] = b
        for item in self.items:
            for other in self.static_boxes():
                from .geometry import obb_penetration

                if obb_penetration(item.box(), other) > 1e-3:
                    raise SceneError(f"item {item.sku!r} intersects static geometry")

    def bins(self) -> list:
        out = []
        for shelf in self.shelves:
            out.extend(shelf.bins)
        return out

    def bin_for_sku(self, sku: str):
        for b in self.bins():
            if b.accepts_sku == sku:
                return b
        return None

    def bin_by_fiducial(self, fid: int):
        for b in self.bins():
            if b.fiducial_id == fid:
                return b
        return None

    def catalog(self) -> list:
        skus = {item.sku for item in self.items}
        skus.update(b.accepts_sku for b in self.bins())
        return sorted(skus)

    def static_boxes(self) -> list:
        """All non-item collision geometry (shelves, bins, cart, walls)."""
        out = list(self.static_meshes)
        for shelf in self.shelves:
            out.extend(shelf.boxes())
        for b in self.bins():
            out.extend(b.boxes())
        out.extend(self.cart.boxes())
        return out

    def item_by_sku(self, sku: str):
        for item in self.items:
            if item.sku == sku:
                return item
        return None


# --------------------------------------------------------------------------
# Serialization


def _pose_to_dict(T: Transform) -> dict:
    return {"t": [float(v) for v in T.t], "R": [[float(v) for v in row] for row in T.R]}


def _pose_from_dict(d: dict) -> Transform:
    return Transform(np.array(d["R"], dtype=float), np.array(d["t"], dtype=float))


def scene_to_dict(scene: Scene, noise: NoiseConfig, robot: dict | None = None) -> dict:
    return {
        "schema_version": SCENE_SCHEMA_VERSION,
        "scene": {
            "bounds": [list(scene.bounds[0]), list(scene.bounds[1])],
            "requester_pose": _pose_to_dict(scene.requester_pose),
            "requester_surface_height": scene.requester_surface_height,
            "shelves": [
                {
                    "pose": _pose_to_dict(s.pose),
                    "width": s.width,
                    "board_depth": s.board_depth,
                    "board_heights": list(s.board_heights),
                    "board_thickness": s.board_thickness,
                    "side_thickness": s.side_thickness,
                    "height": s.height,
                    "bins": [
                        {
                            "fiducial_id": b.fiducial_id,
                            "pose": _pose_to_dict(b.pose),
                            "accepts_sku": b.accepts_sku,
                            "inner": list(b.inner),
                            "depth": b.depth,
                            "wall": b.wall,
                        }
                        for b in s.bins
                    ],
                }
                for s in scene.shelves
            ],
            "cart": {
                "pose": _pose_to_dict(scene.cart.pose),
                "top_extents": list(scene.cart.top_extents),
                "top_height": scene.cart.top_height,
                "items": list(scene.cart.items),
            },
            "items": [
                {
                    "sku": it.sku,
                    "box_extents": list(it.box_extents),
                    "pose": _pose_to_dict(it.pose),
                    "deformable": it.deformable,
                }
                for it in scene.items
            ],
            "static": [
                {"half": [float(v) for v in b.half], "pose": _pose_to_dict(b.pose)}
                for b in scene.static_meshes
            ],
        },
        "robot": robot or {},
        "noise": asdict(noise) | {"marker_pose_sigma": list(noise.marker_pose_sigma)},
    }


def scene_from_dict(doc: dict):
    if doc.get("schema_version") != SCENE_SCHEMA_VERSION:
        raise SceneError(f"unsupported scene schema: {doc.get('schema_version')}")
    sc = doc["scene"]
    shelves = []
    for s in sc["shelves"]:
        shelves.append(
            Shelf(
                pose=_pose_from_dict(s["pose"]),
                width=s["width"],
                board_depth=s["board_depth"],
                board_heights=tuple(s["board_heights"]),
                board_thickness=s["board_thickness"],
                side_thickness=s["side_thickness"],
                height=s["height"],
                bins=[
                    Bin(
                        fiducial_id=b["fiducial_id"],
                        pose=_pose_from_dict(b["pose"]),
                        accepts_sku=b["accepts_sku"],
                        inner=tuple(b["inner"]),
                        depth=b["depth"],
                        wall=b["wall"],
                    )
                    for b in s["bins"]
                ],
            )
        )
    cart = Cart(
        pose=_pose_from_dict(sc["cart"]["pose"]),
        top_extents=tuple(sc["cart"]["top_extents"]),
        top_height=sc["cart"]["top_height"],
        items=list(sc["cart"]["items"]),
    )
    items = [
        Item(
            sku=it["sku"],
            box_extents=tuple(it["box_extents"]),
            pose=_pose_from_dict(it["pose"]),
            deformable=it["deformable"],
        )
        for it in sc["items"]
    ]
    static = [Box(np.array(b["half"]), _pose_from_dict(b["pose"])) for b in sc["static"]]
    scene = Scene(
        shelves=shelves,
        cart=cart,
        items=items,
        static_meshes=static,
        requester_pose=_pose_from_dict(sc["requester_pose"]),
        requester_surface_height=sc["requester_surface_height"],
        bounds=(tuple(sc["bounds"][0]), tuple(sc["bounds"][1])),
    )
    noise_doc = dict(doc["noise"])
    noise_doc["marker_pose_sigma"] = tuple(noise_doc["marker_pose_sigma"])
    noise = NoiseConfig(**noise_doc)
    return scene, noise, doc.get("robot", {})


def save_scene(path, scene: Scene, noise: NoiseConfig, robot: dict | None = None) -> None:
    Path(path).write_text(json.dumps(scene_to_dict(scene, noise, robot), indent=2, sort_keys=True))


def load_scene(path):
    return scene_from_dict(json.loads(Path(path).read_text()))


# --------------------------------------------------------------------------
# Default scenario


def _room_walls(bounds, height=2.2, thickness=0.1) -> list:
    (x0, y0), (x1, y1) = bounds
    cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
    lx, ly = x1 - x0, y1 - y0
    walls = [
        Box([lx / 2 + thickness, thickness / 2, height / 2],
            Transform.from_xyz_yaw(cx, y0 - thickness / 2, height / 2)),
        Box([lx / 2 + thickness, thickness / 2, height / 2],
            Transform.from_xyz_yaw(cx, y1 + thickness / 2, height / 2)),
        Box([thickness / 2, ly / 2 + thickness, height / 2],
            Transform.from_xyz_yaw(x0 - thickness / 2, cy, height / 2)),
        Box([thickness / 2, ly / 2 + thickness, height / 2],
            Transform.from_xyz_yaw(x1 + thickness / 2, cy, height / 2)),
    ]
    return walls


DEFAULT_SKUS = ("saline", "gauze", "syringe")


def default_supply_room(noise: NoiseConfig | None = None, extra_shelf_items: bool = True):
    """The standard 6 x 5 m supply room: one shelf (east wall), a cart,
    a requester table, three skus. Items sit on the middle board for
    retrieval; restock bins sit on the top board.
    """
    noise = noise if noise is not None else NoiseConfig()
    bounds = ((0.0, 0.0), (6.0, 5.0))
    shelf_face_x = 5.35
    shelf = Shelf(pose=Transform.from_xyz_yaw(shelf_face_x, 2.0, 0.0, math.pi))
    # Shelf +x points at -x world (out of the face, toward the room).

    # Bin slots interleave with the item slots below so a retrieval's
    # extraction corridor never runs through a bin's occlusion shadow.
    bin_specs = [(11, "saline", -0.90), (12, "gauze", -0.25), (13, "syringe", 0.33)]
    top_board = shelf.board_heights[-1]
    for fid, sku, dy in bin_specs:
        pose = shelf.pose @ Transform.from_xyz_yaw(-0.17, dy, top_board)
        shelf.bins.append(Bin(fiducial_id=fid, pose=pose, accepts_sku=sku))

    mid_board = shelf.board_heights[1]
    items = []
    if extra_shelf_items:
        item_specs = [
            ("saline", (0.10, 0.09, 0.14), -0.55, False),
            ("gauze", (0.11, 0.10, 0.12), 0.05, True),
            ("syringe", (0.10, 0.08, 0.12), 0.65, False),
        ]
        for sku, extents, dy, deformable in item_specs:
            pose = shelf.pose @ Transform.from_xyz_yaw(-0.10, dy, mid_board + extents[2] / 2)
            items.append(Item(sku=sku, box_extents=extents, pose=pose, deformable=deformable))

    cart = Cart(pose=Transform.from_xyz_yaw(1.6, 1.5, 0.0), items=[])
    cart_specs = [
        ("saline", (0.10, 0.09, 0.14), (-0.24, -0.12)),
        ("gauze", (0.11, 0.10, 0.12), (0.12, -0.05)),
        ("syringe", (0.10, 0.08, 0.12), (0.24, -0.15)),
        ("saline", (0.10, 0.09, 0.14), (-0.04, -0.02)),
    ]
    cart_items = []
    for sku, extents, (dx, dy) in cart_specs:
        pose = cart.pose @ Transform.from_xyz_yaw(dx, dy, cart.top_height + extents[2] / 2)
        cart_items.append(Item(sku=sku, box_extents=extents, pose=pose, deformable=(sku == "gauze")))
    items.extend(cart_items)
    cart.items = [it.sku for it in cart_items]

    statics = _room_walls(bounds)
    requester_pose = Transform.from_xyz_yaw(0.9, 3.70, 0.0, math.pi / 2)
    statics.append(
        Box([0.25, 0.25, 0.4], Transform.from_xyz_yaw(0.9, 4.55, 0.4))
    )  # requester table

    return Scene(
        shelves=[shelf],
        cart=cart,
        items=items,
        static_meshes=statics,
        requester_pose=requester_pose,
        requester_surface_height=0.8,
        bounds=bounds,
    ), noise
