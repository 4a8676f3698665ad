#pragma once

// Head pose (camera extrinsics) and pinhole intrinsics.
//
// Convention: x_cam = R * x_world + t. The camera looks along +z with image
// x to the right and y down; pixel (u, v) has its center at (u + 0.5, v + 0.5).

#include <Eigen/Dense>

#include <cmath>
#include <optional>
#include <vector>

#include "realtalk/error.hpp"

namespace realtalk {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

struct Intrinsics {
  double fx = 0, fy = 0, cx = 0, cy = 0;
  int width = 0, height = 0;

  static Intrinsics for_resolution(int res, double focal_scale = 1.6) {
    return Intrinsics{focal_scale * res, focal_scale * res, 0.5 * res, 0.5 * res, res, res};
  }

  // Rescales to another square resolution, keeping the field of view.
  Intrinsics resized(int res) const {
    const double s = static_cast<double>(res) / width;
    return Intrinsics{fx * s, fy * s, cx * s, cy * s, res, static_cast<int>(std::lround(height * s))};
  }
};

struct HeadPose {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3(0, 0, 3);
  std::optional<std::vector<Eigen::Vector2d>> keypoints;  // tracked 2D points; stored, not consumed

  void validate(double tol = 1e-5) const {
    require(rotation.allFinite() && translation.allFinite(), ErrorCode::invalid_argument, "pose not finite");
    const double det_err = std::abs(rotation.determinant() - 1.0);
    const double orth_err = (rotation * rotation.transpose() - Mat3::Identity()).cwiseAbs().maxCoeff();
    require(det_err <= tol && orth_err <= tol, ErrorCode::invalid_argument,
            "rotation is not orthonormal (|det-1|=" + std::to_string(det_err) + ", |RR^T-I|=" + std::to_string(orth_err) + ")");
  }

  Vec3 camera_origin() const { return -rotation.transpose() * translation; }
  Vec3 to_camera(const Vec3& world) const { return rotation * world + translation; }
};

// Rotation from yaw (about y), pitch (about x), roll (about z), radians.
inline Mat3 rotation_from_euler(double yaw, double pitch, double roll) {
  return (Eigen::AngleAxisd(roll, Vec3::UnitZ()) * Eigen::AngleAxisd(pitch, Vec3::UnitX()) *
          Eigen::AngleAxisd(yaw, Vec3::UnitY()))
      .toRotationMatrix();
}

struct CameraRay {
  Vec3 origin;
  Vec3 direction;  // unit length
};

inline CameraRay pixel_ray(const HeadPose& pose, const Intrinsics& k, double u, double v) {
  Vec3 d_cam((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
  Vec3 d = pose.rotation.transpose() * d_cam;
  return CameraRay{pose.camera_origin(), d.normalized()};
}

}  // namespace realtalk
