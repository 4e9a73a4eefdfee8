#ifndef STYLEPOINT_H
#define STYLEPOINT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SpStatus {
  SP_STATUS_OK = 0,
  SP_STATUS_NULL_POINTER = 1,
  SP_STATUS_INVALID_ARGUMENT = 2,
  SP_STATUS_POSE_OUT_OF_BOUNDS = 3,
  SP_STATUS_IO = 4,
  SP_STATUS_FORMAT = 5,
  SP_STATUS_BUFFER_TOO_SMALL = 6,
  SP_STATUS_PANIC = 7,
  SP_STATUS_INTERNAL = 8,
} SpStatus;

/**
 * Opaque render session.
 */
typedef struct SpSession SpSession;

typedef struct SpSessionInfo {
  uint32_t width;
  uint32_t height;
  uint64_t points;
  /**
   * World→camera, row-major 3×4.
   */
  double canonical_pose[12];
  double max_translation;
  double max_rotation_deg;
} SpSessionInfo;

typedef struct SpStyleUpdate {
  /**
   * NUL-terminated hex id.
   */
  char style_id[17];
  bool cache_hit;
} SpStyleUpdate;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * Valid until the next call into this library on the same thread.
 */
const char *sp_last_error(void);

const char *sp_version(void);

/**
 * Writes a generated scene (`boxes`, `planes` or `room`) into `dir`.
 *
 * # Safety
 * `kind` and `dir` must be NUL-terminated strings.
 */
enum SpStatus sp_make_scene(const char *kind, uint64_t seed, uint32_t size, const char *dir);

/**
 * Opens a session from a pipeline TOML file.
 *
 * # Safety
 * `config_path` must be a NUL-terminated string and `out` writable.
 */
enum SpStatus sp_session_open(const char *config_path, struct SpSession **out);

/**
 * Releases a session; null is ignored.
 *
 * # Safety
 * `session` must come from [`sp_session_open`] and not be used afterwards.
 */
void sp_session_free(struct SpSession *session);

/**
 * # Safety
 * `session` must be a live handle and `out` writable.
 */
enum SpStatus sp_session_info(const struct SpSession *session, struct SpSessionInfo *out);

/**
 * Renders `pose` (12 doubles, row-major 3×4) into `rgb`, `width·height·3`
 * bytes, row-major interleaved.
 *
 * # Safety
 * `pose` must point to 12 doubles and `rgb` to `rgb_len` writable bytes.
 */
enum SpStatus sp_session_render(const struct SpSession *session,
                                const double *pose,
                                uint32_t width,
                                uint32_t height,
                                uint8_t *rgb,
                                size_t rgb_len);

/**
 * Switches the session's style to an 8-bit RGB image.
 *
 * # Safety
 * `rgb` must point to `width·height·3` bytes; `out` may be null.
 */
enum SpStatus sp_session_set_style_rgb8(const struct SpSession *session,
                                        const uint8_t *rgb,
                                        uint32_t width,
                                        uint32_t height,
                                        struct SpStyleUpdate *out);

/**
 * Switches the session's style to a PNG file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` may be null.
 */
enum SpStatus sp_session_set_style_png(const struct SpSession *session,
                                       const char *path,
                                       struct SpStyleUpdate *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STYLEPOINT_H */
