"""Bootstrap executed inside the sandbox interpreter, before untrusted code.

Usage: python -I sandbox_runner.py <fragment_path> <sandbox_root>

Installs the in-process containment profile, then executes the fragment as
``__main__``. This layer is the portable floor of the containment contract;
OS-level isolation (network namespace, rlimits, credential drop) is applied
by the parent process where available. The guards here are best-effort by
nature and are deliberately simple:

* socket creation raises OSError, so outbound connection attempts observe
  failure even without a network namespace;
* open()/os.open() refuse to create or write files whose real path falls
  outside the sandbox root.
"""

import builtins
import os
import sys


def _install_network_guard():
    import socket

    def _blocked(*_args, **_kwargs):
        raise OSError("network access is disabled inside the sandbox")

    socket.socket = _blocked
    socket.create_connection = _blocked
    socket.getaddrinfo = _blocked
    socket.gethostbyname = _blocked


def _install_write_guard(root):
    real_root = os.path.realpath(root)

    def _inside(path):
        target = os.path.realpath(os.path.join(real_root, os.fspath(path)))
        return target == real_root or target.startswith(real_root + os.sep)

    real_open = builtins.open
    real_os_open = os.open

    write_markers = ("w", "a", "x", "+")

    def guarded_open(file, mode="r", *args, **kwargs):
        if isinstance(file, (str, bytes, os.PathLike)):
            if any(m in mode for m in write_markers) and not _inside(file):
                raise PermissionError(
                    f"write outside the sandbox root is not allowed: {file!r}")
        return real_open(file, mode, *args, **kwargs)

    write_flags = os.O_WRONLY | os.O_RDWR | os.O_CREAT | os.O_APPEND | os.O_TRUNC

    def guarded_os_open(path, flags, *args, **kwargs):
        if flags & write_flags and not _inside(path):
            raise PermissionError(
                f"write outside the sandbox root is not allowed: {path!r}")
        return real_os_open(path, flags, *args, **kwargs)

    builtins.open = guarded_open
    os.open = guarded_os_open


def main():
    fragment_path, root = sys.argv[1], sys.argv[2]
    os.chdir(root)
    with open(fragment_path, "r", encoding="utf-8", errors="replace") as fh:
        source = fh.read()
    _install_network_guard()
    _install_write_guard(root)
    sys.argv = [fragment_path]
    code = compile(source, "<fragment>", "exec")
    namespace = {"__name__": "__main__", "__builtins__": builtins}
    exec(code, namespace)


if __name__ == "__main__":
    main()
