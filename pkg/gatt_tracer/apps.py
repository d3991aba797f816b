import logging
import os
import zipfile
from dataclasses import dataclass
from typing import Optional, Tuple

from lxml import etree

from gatt_tracer.smali import parse_program


log = logging.getLogger(__name__)

MANIFEST = "AndroidManifest.xml"
ANDROID_NS = "http://schemas.android.com/apk/res/android"
# manifests come from untrusted apps
MANIFEST_PARSER = etree.XMLParser(resolve_entities=False, no_network=True)


@dataclass(frozen=True)
class App:
    app_id: str
    package_name: Optional[str]
    permissions: Optional[Tuple[str, ...]]
    program: object


def app_id_for(path):
    name = os.path.basename(os.path.normpath(path))
    if name.endswith(".zip"):
        name = name[: -len(".zip")]
    return name


def _read_manifest(path):
    if zipfile.is_zipfile(path):
        with zipfile.ZipFile(path) as archive:
            for name in archive.namelist():
                if os.path.basename(name) == MANIFEST:
                    return archive.read(name)
        return None
    manifest = os.path.join(path, MANIFEST)
    if not os.path.exists(manifest):
        return None
    with open(manifest, "rb") as f:
        return f.read()


def parse_manifest(data):
    """(package name, uses-permission names) from decoded manifest XML."""
    root = etree.fromstring(data, MANIFEST_PARSER)
    package = root.get("package")
    permissions = []
    for element in root.iter("uses-permission"):
        name = element.get("{%s}name" % ANDROID_NS) or element.get("name")
        if name:
            permissions.append(name)
    return package, tuple(sorted(set(permissions)))


def load_permissions(path):
    """Plaintext permission list, one name per line, '#' comments allowed."""
    with open(path, encoding="utf-8") as f:
        lines = [line.split("#", 1)[0].strip() for line in f]
    return tuple(sorted({line for line in lines if line}))


def load_app(path, permissions=None):
    app_id = app_id_for(path)
    program = parse_program(path)
    package_name = app_id if "." in app_id else None
    manifest_permissions = None
    data = _read_manifest(path)
    if data is not None:
        try:
            package, manifest_permissions = parse_manifest(data)
            package_name = package or package_name
        except etree.XMLSyntaxError as e:
            log.warning("%s: unreadable %s (%s)", app_id, MANIFEST, e)
    return App(
        app_id,
        package_name,
        permissions if permissions is not None else manifest_permissions,
        program,
    )


def iter_app_paths(corpus):
    """App directories and zips directly under a corpus directory, sorted."""
    for name in sorted(os.listdir(corpus)):
        path = os.path.join(corpus, name)
        if os.path.isdir(path) or zipfile.is_zipfile(path):
            yield path
