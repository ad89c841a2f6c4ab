import logging

from data_model import FLOAT_FMT, ProfileMatrix, ValidationError

log = logging.getLogger(__name__)


def aggregate_profiles(conn, seg):
    """Cumulative connectivity strength of every voxel to every segmentation region.

    P[i, c] = sum of conn(i, j) over voxels j labelled c. A self-loop lands in
    the column of the voxel's own region, so row sums equal voxel strengths.
    """
    if seg.n != conn.n:
        raise ValidationError(
            f"dimension mismatch: segmentation has {seg.n} voxels, connectivity {conn.n}"
        )
    values = (conn.matrix @ seg.indicator()).tocsr()
    values.sort_indices()
    log.debug("profiles: %d voxels x %d regions, %d nonzeros", conn.n, seg.k, values.nnz)
    return ProfileMatrix(values)


def write_profiles(profiles, path):
    profiles.to_frame().to_csv(path, sep="\t", index_label="voxel", float_format=FLOAT_FMT)
