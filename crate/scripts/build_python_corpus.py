#!/usr/bin/env python3
"""Build the Python snippet fixture corpus used by the syntax-check tests.

Each record pairs a vulnerable snippet with its fixed counterpart for one
CWE. Every snippet is checked with CPython's parser (ast.parse, check-only:
nothing is executed) before being written, and every entry of the invalid
list is confirmed to be rejected. Output:

  crates/core/tests/fixtures/python_corpus.jsonl          valid pairs
  crates/core/tests/fixtures/python_invalid.jsonl         invalid snippets
"""
import ast
import json
import pathlib
import sys

PAIRS = [
    ("CWE-787", '''
def write_record(buf: bytearray, offset: int, payload: bytes) -> None:
    view = memoryview(buf)
    for i, b in enumerate(payload):
        view[offset + i] = b
''', '''
def write_record(buf: bytearray, offset: int, payload: bytes) -> None:
    if offset < 0 or offset + len(payload) > len(buf):
        raise ValueError("payload does not fit in buffer")
    view = memoryview(buf)
    view[offset:offset + len(payload)] = payload
'''),
    ("CWE-79", '''
from flask import Flask, request

app = Flask(__name__)

@app.route("/greet")
def greet():
    name = request.args.get("name", "")
    return "<h1>Hello " + name + "</h1>"
''', '''
from flask import Flask, request
from markupsafe import escape

app = Flask(__name__)

@app.route("/greet")
def greet():
    name = request.args.get("name", "")
    return "<h1>Hello " + str(escape(name)) + "</h1>"
'''),
    ("CWE-89", '''
import sqlite3

def find_user(conn: sqlite3.Connection, username: str):
    cur = conn.cursor()
    cur.execute("SELECT id, email FROM users WHERE name = '%s'" % username)
    return cur.fetchone()
''', '''
import sqlite3

def find_user(conn: sqlite3.Connection, username: str):
    cur = conn.cursor()
    cur.execute("SELECT id, email FROM users WHERE name = ?", (username,))
    return cur.fetchone()
'''),
    ("CWE-416", '''
import ctypes

libc = ctypes.CDLL(None)

def read_after_release(size):
    ptr = libc.malloc(size)
    libc.free(ptr)
    return ctypes.string_at(ptr, size)
''', '''
import ctypes

libc = ctypes.CDLL(None)

def read_then_release(size):
    ptr = libc.malloc(size)
    try:
        return ctypes.string_at(ptr, size)
    finally:
        libc.free(ptr)
'''),
    ("CWE-78", '''
import os

def ping(host):
    return os.system("ping -c 1 " + host)
''', '''
import subprocess

def ping(host):
    return subprocess.run(["ping", "-c", "1", host], check=False).returncode
'''),
    ("CWE-20", '''
def set_quantity(cart, item_id, qty):
    cart[item_id] = int(qty)
    return cart
''', '''
def set_quantity(cart, item_id, qty):
    value = int(qty)
    if value < 1 or value > 100:
        raise ValueError("quantity out of range")
    cart[item_id] = value
    return cart
'''),
    ("CWE-125", '''
import struct

def read_header(data: bytes, index: int) -> int:
    return struct.unpack_from("<I", data, index * 4)[0]
''', '''
import struct

def read_header(data: bytes, index: int) -> int:
    offset = index * 4
    if index < 0 or offset + 4 > len(data):
        raise IndexError("header index out of range")
    return struct.unpack_from("<I", data, offset)[0]
'''),
    ("CWE-22", '''
import os

BASE = "/srv/files"

def read_file(name):
    with open(os.path.join(BASE, name)) as fh:
        return fh.read()
''', '''
import os

BASE = "/srv/files"

def read_file(name):
    path = os.path.realpath(os.path.join(BASE, name))
    if not path.startswith(BASE + os.sep):
        raise PermissionError("path escapes base directory")
    with open(path) as fh:
        return fh.read()
'''),
    ("CWE-352", '''
from flask import Flask, request, session

app = Flask(__name__)

@app.route("/transfer", methods=["POST"])
def transfer():
    amount = request.form["amount"]
    target = request.form["to"]
    return do_transfer(session["user"], target, amount)
''', '''
import hmac
from flask import Flask, abort, request, session

app = Flask(__name__)

@app.route("/transfer", methods=["POST"])
def transfer():
    token = request.form.get("csrf_token", "")
    if not hmac.compare_digest(token, session.get("csrf_token", "")):
        abort(403)
    amount = request.form["amount"]
    target = request.form["to"]
    return do_transfer(session["user"], target, amount)
'''),
    ("CWE-434", '''
import os

UPLOAD_DIR = "/var/www/uploads"

def save_upload(file_storage):
    dest = os.path.join(UPLOAD_DIR, file_storage.filename)
    file_storage.save(dest)
    return dest
''', '''
import os
from werkzeug.utils import secure_filename

UPLOAD_DIR = "/var/www/uploads"
ALLOWED = {".png", ".jpg", ".pdf"}

def save_upload(file_storage):
    name = secure_filename(file_storage.filename)
    if os.path.splitext(name)[1].lower() not in ALLOWED:
        raise ValueError("file type not allowed")
    dest = os.path.join(UPLOAD_DIR, name)
    file_storage.save(dest)
    return dest
'''),
    ("CWE-862", '''
def delete_document(db, user, doc_id):
    db.documents.delete(doc_id)
    return True
''', '''
def delete_document(db, user, doc_id):
    doc = db.documents.get(doc_id)
    if doc is None or doc.owner_id != user.id:
        raise PermissionError("not allowed to delete this document")
    db.documents.delete(doc_id)
    return True
'''),
    ("CWE-476", '''
import re

def extract_version(banner):
    match = re.search(r"v(\\d+)\\.(\\d+)", banner)
    return int(match.group(1)), int(match.group(2))
''', '''
import re

def extract_version(banner):
    match = re.search(r"v(\\d+)\\.(\\d+)", banner)
    if match is None:
        return None
    return int(match.group(1)), int(match.group(2))
'''),
    ("CWE-287", '''
def login(users, username, password):
    user = users.get(username)
    if user and password.startswith(user["password"][:4]):
        return True
    return False
''', '''
import hashlib
import hmac

def login(users, username, password):
    user = users.get(username)
    if not user:
        return False
    digest = hashlib.pbkdf2_hmac("sha256", password.encode(), user["salt"], 200_000)
    return hmac.compare_digest(digest, user["hash"])
'''),
    ("CWE-190", '''
import numpy as np

def total_bytes(count, item_size):
    n = np.int32(count) * np.int32(item_size)
    return bytearray(int(n))
''', '''
import numpy as np

LIMIT = 2**31 - 1

def total_bytes(count, item_size):
    if count < 0 or item_size < 0 or count * item_size > LIMIT:
        raise OverflowError("allocation size too large")
    return bytearray(count * item_size)
'''),
    ("CWE-502", '''
import pickle

def load_session(blob: bytes):
    return pickle.loads(blob)
''', '''
import json

def load_session(blob: bytes):
    data = json.loads(blob.decode("utf-8"))
    if not isinstance(data, dict):
        raise ValueError("session must be an object")
    return data
'''),
    ("CWE-77", '''
import subprocess

def archive(directory):
    cmd = f"tar czf backup.tgz {directory}"
    subprocess.call(cmd, shell=True)
''', '''
import subprocess

def archive(directory):
    subprocess.call(["tar", "czf", "backup.tgz", "--", directory])
'''),
    ("CWE-119", '''
import ctypes

def copy_name(name: bytes):
    buf = ctypes.create_string_buffer(16)
    ctypes.memmove(buf, name, len(name))
    return buf.value
''', '''
import ctypes

def copy_name(name: bytes):
    buf = ctypes.create_string_buffer(16)
    ctypes.memmove(buf, name, min(len(name), ctypes.sizeof(buf) - 1))
    return buf.value
'''),
    ("CWE-798", '''
import psycopg2

def connect():
    return psycopg2.connect(host="db.internal", user="admin", password="S3cr3t!")
''', '''
import os
import psycopg2

def connect():
    return psycopg2.connect(
        host="db.internal",
        user=os.environ["DB_USER"],
        password=os.environ["DB_PASSWORD"],
    )
'''),
    ("CWE-918", '''
import requests

def fetch_preview(url):
    return requests.get(url, timeout=5).text
''', '''
import ipaddress
import socket
from urllib.parse import urlparse

import requests

def fetch_preview(url):
    parsed = urlparse(url)
    if parsed.scheme not in ("http", "https") or not parsed.hostname:
        raise ValueError("unsupported url")
    addr = ipaddress.ip_address(socket.gethostbyname(parsed.hostname))
    if addr.is_private or addr.is_loopback or addr.is_link_local:
        raise ValueError("internal addresses are not allowed")
    return requests.get(url, timeout=5, allow_redirects=False).text
'''),
    ("CWE-306", '''
from flask import Flask

app = Flask(__name__)

@app.route("/admin/reset", methods=["POST"])
def reset_all():
    wipe_database()
    return "ok"
''', '''
from flask import Flask, abort
from flask_login import current_user, login_required

app = Flask(__name__)

@app.route("/admin/reset", methods=["POST"])
@login_required
def reset_all():
    if not current_user.is_admin:
        abort(403)
    wipe_database()
    return "ok"
'''),
    ("CWE-362", '''
import threading

balance = {"value": 100}

def withdraw(amount):
    if balance["value"] >= amount:
        current = balance["value"]
        balance["value"] = current - amount
        return True
    return False
''', '''
import threading

balance = {"value": 100}
lock = threading.Lock()

def withdraw(amount):
    with lock:
        if balance["value"] >= amount:
            balance["value"] -= amount
            return True
        return False
'''),
    ("CWE-269", '''
import os

def run_job(job):
    os.setuid(0)
    job.execute()
''', '''
import os
import pwd

def run_job(job):
    nobody = pwd.getpwnam("nobody")
    os.setgid(nobody.pw_gid)
    os.setuid(nobody.pw_uid)
    job.execute()
'''),
    ("CWE-94", '''
def calculate(expression):
    return eval(expression)
''', '''
import ast
import operator

OPS = {ast.Add: operator.add, ast.Sub: operator.sub,
       ast.Mult: operator.mul, ast.Div: operator.truediv}

def calculate(expression):
    def walk(node):
        if isinstance(node, ast.Expression):
            return walk(node.body)
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
            return node.value
        if isinstance(node, ast.BinOp) and type(node.op) in OPS:
            return OPS[type(node.op)](walk(node.left), walk(node.right))
        raise ValueError("unsupported expression")
    return walk(ast.parse(expression, mode="eval"))
'''),
    ("CWE-863", '''
def view_invoice(user, invoice):
    if user.is_authenticated:
        return invoice.render()
    raise PermissionError("login required")
''', '''
def view_invoice(user, invoice):
    if user.is_authenticated and invoice.customer_id == user.customer_id:
        return invoice.render()
    raise PermissionError("not allowed to view this invoice")
'''),
    ("CWE-276", '''
import os

def write_secret(path, secret):
    with open(path, "w") as fh:
        fh.write(secret)
    os.chmod(path, 0o777)
''', '''
import os

def write_secret(path, secret):
    fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
    with os.fdopen(fd, "w") as fh:
        fh.write(secret)
'''),
]

INVALID = [
    "def f(:",
    "def f():\nreturn 1",
    "x = (1,\n",
    "print 'hello'",
    "if True\n    pass",
    "class A:\n    def m(self)\n        pass",
    "for i in range(3):\npass",
    "x = 1\n  y = 2",
    "import",
    "def g():\n    return [1, 2,",
]


def parses(src):
    try:
        ast.parse(src)
        return True
    except SyntaxError:
        return False


def main():
    root = pathlib.Path(__file__).resolve().parent.parent
    out = root / "crates/core/tests/fixtures"
    ok = True
    with open(out / "python_corpus.jsonl", "w") as fh:
        for cwe, vuln, fixed in PAIRS:
            vuln, fixed = vuln.strip("\n"), fixed.strip("\n")
            for label, src in (("vulnerable", vuln), ("fixed", fixed)):
                if not parses(src):
                    print(f"{cwe} {label} does not parse", file=sys.stderr)
                    ok = False
            fh.write(json.dumps({"cwe": cwe, "vulnerable": vuln, "fixed": fixed}) + "\n")
    with open(out / "python_invalid.jsonl", "w") as fh:
        for src in INVALID:
            if parses(src):
                print(f"expected rejection: {src!r}", file=sys.stderr)
                ok = False
            try:
                ast.parse(src)
            except SyntaxError as exc:
                fh.write(json.dumps({"code": src, "cpython_line": exc.lineno}) + "\n")
    print(f"{len(PAIRS)} pairs ({2 * len(PAIRS)} snippets), {len(INVALID)} invalid")
    sys.exit(0 if ok else 1)


if __name__ == "__main__":
    main()
